//! Gated-subspace merging: per-layer SVD of the reasoning task vector with
//! sigmoid gates on the singular directions.
//!
//! The reasoning delta of every merged weight layer is factored once into
//! U·diag(s)·Vᵀ; the factors and the bias deltas are then frozen. A gate
//! vector g (one entry per retained direction, initialized to exactly zero)
//! modulates the singular values as σ(g)⊙s, and the merged layer is
//! θ_vlm + λ_lrm·U·diag(σ(g)⊙s)·Vᵀ with θ_vlm always at coefficient 1.
//! Biases bypass the SVD: a merged bias is θ_vlm.b + λ_lrm·mean(σ(g))·τ.b,
//! which agrees with the half-open gates at init and saturates to 0 or
//! λ_lrm with them.

use crate::checkpoint::{container_from_bytes, container_to_bytes};
use crate::error::{Error, Result};
use crate::mathx::sigmoid;
use crate::merge::TaskVector;
use crate::model::{ArchSpec, Mat, ModelParams, Provenance};
use crate::tensor::{svd, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Whether gates act per singular direction or as one scalar per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Subspace,
    ScalarGate,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Subspace => "subspace",
            Variant::ScalarGate => "scalar_gate",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "subspace" => Ok(Variant::Subspace),
            "scalar_gate" => Ok(Variant::ScalarGate),
            _ => Err(Error::Config(format!("unknown gate variant '{s}'"))),
        }
    }
}

/// Merge-construction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrismConfig {
    /// Scale on the gated reasoning update (the VLM side is pinned at 1).
    pub lambda_lrm: f64,
    /// Weight of the injection bonus in the training loss.
    pub alpha: f64,
    /// Keep only the top-k singular directions per layer when set.
    pub rank_truncation: Option<usize>,
    pub variant: Variant,
}

impl Default for FrismConfig {
    fn default() -> Self {
        FrismConfig {
            lambda_lrm: 0.2,
            alpha: 0.2,
            rank_truncation: None,
            variant: Variant::Subspace,
        }
    }
}

/// Default truncation depth when low-rank mode is switched on.
pub const DEFAULT_RANK_TRUNCATION: usize = 8;

impl FrismConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lrm > 0.0) || !self.lambda_lrm.is_finite() {
            return Err(Error::Config(format!(
                "lambda_lrm must be positive, got {}",
                self.lambda_lrm
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if let Some(k) = self.rank_truncation {
            if k == 0 {
                return Err(Error::Config("rank_truncation must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// Frozen factorization of one layer's reasoning delta.
#[derive(Debug, Clone)]
pub struct LayerDecomposition {
    /// m×r left singular vectors.
    pub u: Tensor,
    /// r retained singular values, descending.
    pub s: Tensor,
    /// r×n right singular vectors, transposed.
    pub vt: Tensor,
    /// Retained direction count == gate length.
    pub rank: usize,
    /// The layer's raw bias delta (bypasses the SVD).
    pub tau_b: Tensor,
    /// True when every retained singular value is zero (no subspace to
    /// gate); such layers merge to θ_vlm unchanged.
    pub degenerate: bool,
}

/// Frozen per-layer factors plus the loss normalizer captured at
/// decomposition time.
#[derive(Debug, Clone)]
pub struct SubspaceDecomposition {
    pub arch: ArchSpec,
    /// Keyed by layer prefix ("layer0"), covering every non-frozen layer.
    pub layers: BTreeMap<String, LayerDecomposition>,
    /// |raw injection sum at zero gates| = 0.25·Σ_l‖s_l‖²; frozen here so
    /// the normalized injection loss is exactly −1 at init.
    pub inject_normalizer: f64,
}

impl SubspaceDecomposition {
    /// Total gate count Σ_l rank(l); the only trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.layers.values().map(|l| l.rank).sum()
    }
}

/// Trainable gate vectors, one per decomposed layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    /// Keyed by layer prefix; length equals the layer's retained rank.
    pub gates: BTreeMap<String, Vec<f32>>,
    pub trainable: bool,
}

impl GateSet {
    /// Gates start at exactly zero: every direction half-open.
    pub fn zero_init(d: &SubspaceDecomposition) -> GateSet {
        GateSet {
            gates: d
                .layers
                .iter()
                .map(|(name, l)| (name.clone(), vec![0.0f32; l.rank]))
                .collect(),
            trainable: true,
        }
    }

    pub fn layer(&self, name: &str) -> Result<&[f32]> {
        self.gates
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("no gates for layer '{name}'")))
    }

    /// Mean sigmoid activation over every gate entry.
    pub fn mean_activation(&self) -> f64 {
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for g in self.gates.values() {
            for &v in g {
                acc += sigmoid(v as f64);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }
}

/// Per-layer SVD of the reasoning task vector's merged weight layers.
/// Frozen layers are excluded; bias deltas are carried through unfactored.
pub fn decompose(
    arch: &ArchSpec,
    tau_lrm: &TaskVector,
    cfg: &FrismConfig,
) -> Result<SubspaceDecomposition> {
    cfg.validate()?;
    arch.validate()?;
    let mut layers = BTreeMap::new();
    let mut raw_at_init = 0.0f64;
    for wname in arch.merged_weight_names() {
        let layer = wname.trim_end_matches(".w").to_string();
        let tw = tau_lrm
            .tensors
            .get(&wname)
            .ok_or_else(|| Error::Incompatible(format!("task vector misses '{wname}'")))?;
        let tb = tau_lrm
            .tensors
            .get(&format!("{layer}.b"))
            .ok_or_else(|| Error::Incompatible(format!("task vector misses '{layer}.b'")))?;
        let full = svd(tw)?;
        // Retain the top-k directions even past the effective rank: their
        // singular values are exactly zero and the gates on them are inert,
        // but the stored factor shapes stay rank-truncation invariant.
        let keep = cfg
            .rank_truncation
            .unwrap_or(usize::MAX)
            .min(tw.rows().min(tw.cols()));
        let (m, n, r) = (tw.rows(), tw.cols(), full.s.len());
        let mut u = Tensor::zeros(&[m, keep])?;
        for i in 0..m {
            for k in 0..keep {
                u.data_mut()[i * keep + k] = full.u.data()[i * r + k];
            }
        }
        let s = Tensor::from_vec(&[keep], full.s.data()[..keep].to_vec())?;
        let mut vt = Tensor::zeros(&[keep, n])?;
        vt.data_mut()[..keep * n].copy_from_slice(&full.vt.data()[..keep * n]);
        let degenerate = s.data().iter().all(|&v| v == 0.0);
        raw_at_init += 0.25 * s.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        layers.insert(
            layer,
            LayerDecomposition {
                u,
                s,
                vt,
                rank: keep,
                tau_b: tb.clone(),
                degenerate,
            },
        );
    }
    Ok(SubspaceDecomposition {
        arch: arch.clone(),
        layers,
        inject_normalizer: raw_at_init,
    })
}

/// λ_lrm · U · diag(σ(g)⊙s) · Vᵀ in f64.
pub fn effective_update_mat(d: &LayerDecomposition, g: &[f32], lambda_lrm: f64) -> Result<Mat> {
    if g.len() != d.rank {
        return Err(Error::Shape(format!(
            "gate length {} does not match rank {}",
            g.len(),
            d.rank
        )));
    }
    let (m, n) = (d.u.rows(), d.vt.cols());
    let mut out = Mat::zeros(m, n);
    for k in 0..d.rank {
        let s_eff = lambda_lrm * sigmoid(g[k] as f64) * (d.s.data()[k] as f64);
        if s_eff == 0.0 {
            continue;
        }
        for i in 0..m {
            let us = (d.u.at(i, k) as f64) * s_eff;
            if us == 0.0 {
                continue;
            }
            for j in 0..n {
                let v = out.at(i, j) + us * (d.vt.at(k, j) as f64);
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// f32 view of [`effective_update_mat`].
pub fn effective_update(d: &LayerDecomposition, g: &[f32], lambda_lrm: f64) -> Result<Tensor> {
    effective_update_mat(d, g, lambda_lrm)?.to_tensor()
}

/// θ_vlm layer + gated update, with the θ_vlm contribution at exactly 1.
pub fn merged_weight(
    vlm_w: &Tensor,
    d: &LayerDecomposition,
    g: &[f32],
    lambda_lrm: f64,
) -> Result<Tensor> {
    merged_weight_mat(vlm_w, d, g, lambda_lrm)?.to_tensor()
}

/// f64 form of [`merged_weight`]; the trainer's student network uses these
/// directly so gate gradients see no f32 rounding.
pub fn merged_weight_mat(
    vlm_w: &Tensor,
    d: &LayerDecomposition,
    g: &[f32],
    lambda_lrm: f64,
) -> Result<Mat> {
    if vlm_w.rows() != d.u.rows() || vlm_w.cols() != d.vt.cols() {
        return Err(Error::Shape(format!(
            "layer shape {:?} does not match decomposition {}x{}",
            vlm_w.shape(),
            d.u.rows(),
            d.vt.cols()
        )));
    }
    let mut out = effective_update_mat(d, g, lambda_lrm)?;
    for (o, &w) in out.data_mut().iter_mut().zip(vlm_w.data()) {
        *o += w as f64;
    }
    Ok(out)
}

/// Merged bias in f64: θ_vlm.b + λ_lrm·mean(σ(g))·τ.b as a 1×n row.
/// Degenerate layers (rank 0 or zero spectrum) keep θ_vlm.b untouched.
pub fn merged_bias_mat(
    vlm_b: &Tensor,
    d: &LayerDecomposition,
    g: &[f32],
    lambda_lrm: f64,
) -> Result<Mat> {
    if g.len() != d.rank {
        return Err(Error::Shape(format!(
            "gate length {} does not match rank {}",
            g.len(),
            d.rank
        )));
    }
    let mut out = Mat::from_tensor(vlm_b)?;
    if d.rank == 0 || d.degenerate {
        return Ok(out);
    }
    let mean: f64 = g.iter().map(|&v| sigmoid(v as f64)).sum::<f64>() / d.rank as f64;
    let scale = lambda_lrm * mean;
    for (o, &t) in out.data_mut().iter_mut().zip(d.tau_b.data()) {
        *o += scale * (t as f64);
    }
    Ok(out)
}

/// The full merged network as f64 matrices: gated layers from the
/// decomposition, everything else (frozen layers) copied from θ_vlm.
pub fn student_weights(
    vlm: &ModelParams,
    d: &SubspaceDecomposition,
    gates: &GateSet,
    lambda_lrm: f64,
) -> Result<BTreeMap<String, Mat>> {
    if vlm.arch != d.arch {
        return Err(Error::Incompatible(
            "decomposition was built for a different architecture".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for (name, t) in &vlm.tensors {
        let layer = name
            .trim_end_matches(".w")
            .trim_end_matches(".b")
            .to_string();
        match d.layers.get(&layer) {
            Some(l) if !l.degenerate => {
                let g = gates.layer(&layer)?;
                let m = if name.ends_with(".w") {
                    merged_weight_mat(t, l, g, lambda_lrm)?
                } else {
                    merged_bias_mat(t, l, g, lambda_lrm)?
                };
                out.insert(name.clone(), m);
            }
            _ => {
                out.insert(name.clone(), Mat::from_tensor(t)?);
            }
        }
    }
    Ok(out)
}

/// Collapses the gated structure into a plain f32 checkpoint. Frozen and
/// degenerate layers are copied from θ_vlm bit-for-bit.
pub fn materialize(
    vlm: &ModelParams,
    d: &SubspaceDecomposition,
    gates: &GateSet,
    cfg: &FrismConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    let weights = student_weights(vlm, d, gates, cfg.lambda_lrm)?;
    let mut out = vlm.clone();
    for (name, t) in out.tensors.iter_mut() {
        let layer = name
            .trim_end_matches(".w")
            .trim_end_matches(".b")
            .to_string();
        if d.layers.get(&layer).map_or(false, |l| !l.degenerate) {
            let m = &weights[name];
            let data: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
            *t = Tensor::from_vec(t.shape(), data)?;
        }
    }
    out.provenance = Provenance::Merged;
    out.validate()?;
    Ok(out)
}

/// θ_vlm^(l) + λ_lrm·σ(g_l)·τ_lrm^(l) with one scalar gate per merged
/// layer, applied to the whole layer delta (weights and bias alike).
pub fn scalar_gate_variant(
    vlm: &ModelParams,
    tau_lrm: &TaskVector,
    g_scalar: &BTreeMap<String, f32>,
    lambda_lrm: f64,
) -> Result<ModelParams> {
    let mut out = vlm.clone();
    for wname in vlm.arch.merged_weight_names() {
        let layer = wname.trim_end_matches(".w").to_string();
        let &g = g_scalar
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no scalar gate for layer '{layer}'")))?;
        let scale = lambda_lrm * sigmoid(g as f64);
        for suffix in [".w", ".b"] {
            let name = format!("{layer}{suffix}");
            let tau = tau_lrm
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Incompatible(format!("task vector misses '{name}'")))?;
            let t = out.tensors.get_mut(&name).expect("arch-declared tensor");
            for (w, &dv) in t.data_mut().iter_mut().zip(tau.data()) {
                *w = ((*w as f64) + scale * (dv as f64)) as f32;
            }
        }
    }
    out.provenance = Provenance::Merged;
    Ok(out)
}

/// Archive layout: "{layer}.u/.s/.vt/.tb" tensors plus the manifest's
/// lambda_lrm and inject_normalizer fields.
pub fn decomposition_to_bytes(d: &SubspaceDecomposition, lambda_lrm: f64) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    for (layer, l) in &d.layers {
        tensors.insert(format!("{layer}.u"), l.u.clone());
        tensors.insert(format!("{layer}.s"), l.s.clone());
        tensors.insert(format!("{layer}.vt"), l.vt.clone());
        tensors.insert(format!("{layer}.tb"), l.tau_b.clone());
    }
    container_to_bytes(
        &d.arch,
        Provenance::Lrm,
        &tensors,
        Some(lambda_lrm),
        Some(d.inject_normalizer),
        None,
    )
}

pub fn decomposition_from_bytes(bytes: &[u8]) -> Result<(SubspaceDecomposition, f64)> {
    let c = container_from_bytes(bytes)?;
    let lambda_lrm = c
        .manifest
        .lambda_lrm
        .ok_or_else(|| Error::Format("decomposition archive misses lambda_lrm".into()))?;
    let inject_normalizer = c
        .manifest
        .inject_normalizer
        .ok_or_else(|| Error::Format("decomposition archive misses inject_normalizer".into()))?;
    let mut layers = BTreeMap::new();
    for wname in c.manifest.arch.merged_weight_names() {
        let layer = wname.trim_end_matches(".w").to_string();
        let get = |suffix: &str| {
            c.tensors
                .get(&format!("{layer}{suffix}"))
                .cloned()
                .ok_or_else(|| {
                    Error::Format(format!("decomposition archive misses '{layer}{suffix}'"))
                })
        };
        let (u, s, vt, tau_b) = (get(".u")?, get(".s")?, get(".vt")?, get(".tb")?);
        let rank = s.len();
        if u.ndim() != 2 || vt.ndim() != 2 || u.cols() != rank || vt.rows() != rank {
            return Err(Error::Format(format!(
                "inconsistent factor shapes for layer '{layer}'"
            )));
        }
        let degenerate = s.data().iter().all(|&v| v == 0.0);
        layers.insert(
            layer,
            LayerDecomposition {
                u,
                s,
                vt,
                rank,
                tau_b,
                degenerate,
            },
        );
    }
    Ok((
        SubspaceDecomposition {
            arch: c.manifest.arch,
            layers,
            inject_normalizer,
        },
        lambda_lrm,
    ))
}

pub fn save_decomposition(d: &SubspaceDecomposition, lambda_lrm: f64, path: &Path) -> Result<()> {
    std::fs::write(path, decomposition_to_bytes(d, lambda_lrm)?)?;
    Ok(())
}

pub fn load_decomposition(path: &Path) -> Result<(SubspaceDecomposition, f64)> {
    decomposition_from_bytes(&std::fs::read(path)?)
}

/// Gates archive: "{layer}.g" tensors plus the manifest's variant field.
pub fn gates_to_bytes(arch: &ArchSpec, gates: &GateSet, variant: Variant) -> Result<Vec<u8>> {
    let tensors: BTreeMap<String, Tensor> = gates
        .gates
        .iter()
        .map(|(layer, g)| {
            Ok((
                format!("{layer}.g"),
                Tensor::from_vec(&[g.len().max(1)], if g.is_empty() { vec![0.0] } else { g.clone() })?,
            ))
        })
        .collect::<Result<_>>()?;
    container_to_bytes(
        arch,
        Provenance::Merged,
        &tensors,
        None,
        None,
        Some(variant.as_str().to_string()),
    )
}

pub fn gates_from_bytes(bytes: &[u8]) -> Result<(GateSet, Variant)> {
    let c = container_from_bytes(bytes)?;
    let variant = match &c.manifest.variant {
        Some(v) => Variant::parse(v)?,
        None => Variant::Subspace,
    };
    let gates = c
        .tensors
        .iter()
        .map(|(name, t)| {
            let layer = name
                .strip_suffix(".g")
                .ok_or_else(|| Error::Format(format!("unexpected tensor '{name}' in gate archive")))?;
            Ok((layer.to_string(), t.data().to_vec()))
        })
        .collect::<Result<_>>()?;
    Ok((
        GateSet {
            gates,
            trainable: true,
        },
        variant,
    ))
}

pub fn save_gates(arch: &ArchSpec, gates: &GateSet, variant: Variant, path: &Path) -> Result<()> {
    std::fs::write(path, gates_to_bytes(arch, gates, variant)?)?;
    Ok(())
}

pub fn load_gates(path: &Path) -> Result<(GateSet, Variant)> {
    gates_from_bytes(&std::fs::read(path)?)
}

//! Task-vector construction and baseline merging algorithms.
//!
//! A task vector is the elementwise difference between a fine-tuned model
//! and its base. Checkpoints produced by `make_triple` sit on a 2⁻²⁰ weight
//! grid, so differences and their re-addition are exact in f32: the λ=1/λ=0
//! merge identities hold bit-for-bit.
//!
//! Frozen layers carry reasoning content only through τ_vlm: θ_lrm's frozen
//! deltas are exactly zero by construction, and every operation here
//! preserves exact zeros (trim, election, drop-and-rescale, and weighted
//! sums all map 0 to 0), so no merge ever writes reasoning-vector content
//! into a frozen layer.

use crate::checkpoint::checkpoint_checksum;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Provenance};
use crate::rng::PortableRng;
use crate::tensor::{svd, Tensor};
use std::collections::BTreeMap;

/// Per-layer deltas of a fine-tuned model against its base.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub tensors: BTreeMap<String, Tensor>,
    /// Which fine-tuned model produced the deltas.
    pub source: Provenance,
    /// Checksum of the base checkpoint the deltas were taken against.
    pub base_id: u64,
}

/// τ = ft − base, elementwise per tensor.
pub fn task_vector(ft: &ModelParams, base: &ModelParams) -> Result<TaskVector> {
    if ft.arch != base.arch {
        return Err(Error::Incompatible(
            "task vector requires identical architectures".into(),
        ));
    }
    let mut tensors = BTreeMap::new();
    for (name, t) in &ft.tensors {
        let b = base.tensor(name)?;
        tensors.insert(name.clone(), t.sub(b)?);
    }
    Ok(TaskVector {
        tensors,
        source: ft.provenance,
        base_id: checkpoint_checksum(base)?,
    })
}

fn check_vector(base: &ModelParams, tau: &TaskVector, what: &str) -> Result<()> {
    let id = checkpoint_checksum(base)?;
    if tau.base_id != id {
        return Err(Error::Incompatible(format!(
            "{what} was built against a different base (checksum {:016x} vs {id:016x})",
            tau.base_id
        )));
    }
    for (name, t) in &tau.tensors {
        let b = base.tensor(name)?;
        if t.shape() != b.shape() {
            return Err(Error::Incompatible(format!(
                "{what} tensor '{name}' shape {:?} does not match base {:?}",
                t.shape(),
                b.shape()
            )));
        }
    }
    if tau.tensors.len() != base.tensors.len() {
        return Err(Error::Incompatible(format!(
            "{what} covers {} tensors, base has {}",
            tau.tensors.len(),
            base.tensors.len()
        )));
    }
    Ok(())
}

/// θ = base + λ_vlm·τ_vlm + λ_lrm·τ_lrm, elementwise over every tensor.
pub fn merge_task_arithmetic(
    base: &ModelParams,
    tau_vlm: &TaskVector,
    tau_lrm: &TaskVector,
    lambda_vlm: f64,
    lambda_lrm: f64,
) -> Result<ModelParams> {
    for l in [lambda_vlm, lambda_lrm] {
        if !l.is_finite() {
            return Err(Error::Domain(format!("non-finite coefficient {l}")));
        }
    }
    check_vector(base, tau_vlm, "tau_vlm")?;
    check_vector(base, tau_lrm, "tau_lrm")?;
    let mut merged = base.clone();
    for (name, t) in merged.tensors.iter_mut() {
        let tv = &tau_vlm.tensors[name];
        let tl = &tau_lrm.tensors[name];
        for ((w, &dv), &dl) in t.data_mut().iter_mut().zip(tv.data()).zip(tl.data()) {
            *w = ((*w as f64) + lambda_vlm * (dv as f64) + lambda_lrm * (dl as f64)) as f32;
        }
    }
    merged.provenance = Provenance::Merged;
    Ok(merged)
}

/// Per-layer coefficients keyed by layer prefix (e.g. "layer0"); one
/// coefficient covers that layer's weight and bias.
pub type LayerCoeffs = BTreeMap<String, f64>;

/// θ^(l) = base^(l) + λ_vlm^(l)·τ_vlm^(l) + λ_lrm^(l)·τ_lrm^(l) for every
/// non-frozen layer; frozen layers are copied from θ_vlm so the result is a
/// deployable model with the tuned input tower. Both maps must provide a
/// coefficient for every non-frozen layer. With constant maps the non-frozen
/// layers match `merge_task_arithmetic` bitwise, and the whole model matches
/// when λ_vlm = 1.
pub fn merge_layer_wise(
    base: &ModelParams,
    vlm: &ModelParams,
    tau_vlm: &TaskVector,
    tau_lrm: &TaskVector,
    lambda_vlm: &LayerCoeffs,
    lambda_lrm: &LayerCoeffs,
) -> Result<ModelParams> {
    check_vector(base, tau_vlm, "tau_vlm")?;
    check_vector(base, tau_lrm, "tau_lrm")?;
    if vlm.arch != base.arch {
        return Err(Error::Incompatible(
            "layer-wise merge requires matching architectures".into(),
        ));
    }
    let merged_layers: Vec<String> = base
        .arch
        .layer_dims()
        .into_iter()
        .map(|(name, _, _)| name)
        .filter(|name| !base.arch.is_frozen(&format!("{name}.w")))
        .collect();
    for (label, map) in [("lambda_vlm", lambda_vlm), ("lambda_lrm", lambda_lrm)] {
        for layer in &merged_layers {
            match map.get(layer) {
                None => {
                    return Err(Error::Config(format!(
                        "{label} is missing a coefficient for layer '{layer}'"
                    )))
                }
                Some(l) if !l.is_finite() => {
                    return Err(Error::Config(format!(
                        "{label}['{layer}'] is not finite"
                    )))
                }
                _ => {}
            }
        }
        for key in map.keys() {
            if !merged_layers.contains(key) {
                return Err(Error::Config(format!(
                    "{label} names unknown or frozen layer '{key}'"
                )));
            }
        }
    }
    let mut merged = vlm.clone();
    for layer in &merged_layers {
        let (lv, ll) = (lambda_vlm[layer], lambda_lrm[layer]);
        for suffix in [".w", ".b"] {
            let name = format!("{layer}{suffix}");
            let out = merged.tensors.get_mut(&name).expect("validated layer");
            let b = &base.tensors[&name];
            let tv = &tau_vlm.tensors[&name];
            let tl = &tau_lrm.tensors[&name];
            for (((w, &bv), &dv), &dl) in out
                .data_mut()
                .iter_mut()
                .zip(b.data())
                .zip(tv.data())
                .zip(tl.data())
            {
                *w = ((bv as f64) + lv * (dv as f64) + ll * (dl as f64)) as f32;
            }
        }
    }
    merged.provenance = Provenance::Merged;
    Ok(merged)
}

/// Trim-elect-merge combination of task vectors, added to base at scale λ.
///
/// Per layer and per vector, the top `ceil(density·N)` entries by magnitude
/// survive (ties broken toward the lower index); the rest are zeroed. Each
/// entry's sign is elected by the sign of the sum of surviving values, and
/// the merged delta is the mean of surviving values that agree with the
/// elected sign (zero when the election is a dead heat).
pub fn ties_merge(
    base: &ModelParams,
    vectors: &[&TaskVector],
    density: f64,
    lambda: f64,
) -> Result<ModelParams> {
    if vectors.is_empty() {
        return Err(Error::Config("ties_merge needs at least one task vector".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Range(format!("density {density} outside (0, 1]")));
    }
    if !lambda.is_finite() {
        return Err(Error::Domain(format!("non-finite coefficient {lambda}")));
    }
    for tau in vectors {
        check_vector(base, tau, "ties input")?;
    }
    let mut merged = base.clone();
    for (name, out) in merged.tensors.iter_mut() {
        let n = out.len();
        let trimmed: Vec<Vec<f64>> = vectors
            .iter()
            .map(|tau| trim_by_magnitude(tau.tensors[name].data(), density))
            .collect();
        for e in 0..n {
            let sum: f64 = trimmed.iter().map(|t| t[e]).sum();
            let elected = if sum > 0.0 {
                1.0
            } else if sum < 0.0 {
                -1.0
            } else {
                0.0
            };
            let mut acc = 0.0f64;
            let mut count = 0usize;
            if elected != 0.0 {
                for t in &trimmed {
                    if t[e] != 0.0 && (t[e] > 0.0) == (elected > 0.0) {
                        acc += t[e];
                        count += 1;
                    }
                }
            }
            let delta = if count > 0 { acc / count as f64 } else { 0.0 };
            let w = &mut out.data_mut()[e];
            *w = ((*w as f64) + lambda * delta) as f32;
        }
    }
    merged.provenance = Provenance::Merged;
    Ok(merged)
}

/// Keeps the top ceil(density·N) entries by |value| (lower index wins ties),
/// zeroing the rest. Exposed for the brute-force oracle in tests.
pub fn trim_by_magnitude(values: &[f32], density: f64) -> Vec<f64> {
    let n = values.len();
    let keep = ((density * n as f64).ceil() as usize).clamp(0, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (values[a].abs(), values[b].abs());
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    let mut out = vec![0.0f64; n];
    for &idx in order.iter().take(keep) {
        out[idx] = values[idx] as f64;
    }
    out
}

/// Drop-and-rescale: each entry is zeroed with probability `drop`,
/// survivors are scaled by 1/(1−drop). One RNG stream drives the whole
/// vector in tensor-name order, so a seed pins every mask bit.
pub fn dare(tau: &TaskVector, drop: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&drop) {
        return Err(Error::Range(format!("drop probability {drop} outside [0, 1)")));
    }
    let mut rng = PortableRng::new(seed);
    let scale = 1.0 / (1.0 - drop);
    let mut out = tau.clone();
    for t in out.tensors.values_mut() {
        for v in t.data_mut() {
            if rng.next_f64() < drop {
                *v = 0.0;
            } else {
                *v = ((*v as f64) * scale) as f32;
            }
        }
    }
    Ok(out)
}

/// Scale-alignment coefficient λ = Σσ_vlm / Σσ_lrm, plus a flag raised when
/// λ exceeds `lambda_warn` (the documented failure mode of norm alignment on
/// mismatched spectra).
pub fn ip_coefficient(
    sigma_vlm: &[f32],
    sigma_lrm: &[f32],
    lambda_warn: f64,
) -> Result<(f64, bool)> {
    let num: f64 = sigma_vlm.iter().map(|&v| v as f64).sum();
    let den: f64 = sigma_lrm.iter().map(|&v| v as f64).sum();
    if !(den > 0.0) {
        return Err(Error::Degenerate(
            "ip coefficient needs a positive reasoning spectrum sum".into(),
        ));
    }
    let lambda = num / den;
    Ok((lambda, lambda > lambda_warn))
}

/// Per-layer IP coefficients from the SVD spectra of both task vectors'
/// weight matrices. Layers whose reasoning delta is exactly zero (frozen
/// layers, untouched layers) have no defined coefficient and are skipped;
/// the result covers exactly the layers the reasoning vector updates.
pub fn ip_lambdas(
    tau_vlm: &TaskVector,
    tau_lrm: &TaskVector,
    lambda_warn: f64,
) -> Result<BTreeMap<String, (f64, bool)>> {
    let mut out = BTreeMap::new();
    for (name, tv) in &tau_vlm.tensors {
        if !name.ends_with(".w") || tv.ndim() != 2 {
            continue;
        }
        let tl = tau_lrm
            .tensors
            .get(name)
            .ok_or_else(|| Error::Incompatible(format!("missing tensor '{name}'")))?;
        if tl.frob_norm_sq() == 0.0 {
            continue;
        }
        let sv = svd(tv)?;
        let sl = svd(tl)?;
        let layer = name.trim_end_matches(".w").to_string();
        out.insert(layer, ip_coefficient(sv.s.data(), sl.s.data(), lambda_warn)?);
    }
    Ok(out)
}

/// Default threshold for the IP failure-mode flag.
pub const IP_LAMBDA_WARN: f64 = 2.0;

/// One evaluated cell of the rank-injection sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rank: usize,
    pub lambda: f64,
    pub layer_set: String,
    pub score_task_v: f64,
    pub score_task_r: f64,
}

/// Grid of sweep scores, serializable as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,lambda,layer_set,score_taskV,score_taskR\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.rank, r.lambda, r.layer_set, r.score_task_v, r.score_task_r
            ));
        }
        s
    }
}

/// Norm-aligned single-rank injection sweep.
///
/// For each (rank n, λ) cell, every non-frozen weight layer receives
/// `θ_vlm^l + Δθ^{rank=n}_l · (‖τ_l‖²/‖Δθ^{rank=n}_l‖²) · λ`, where
/// Δθ^{rank=n}_l is the n-th singular component (0-based) of that layer's
/// reasoning delta and ‖Δθ^{rank=n}_l‖ = σ_n. The aligned component's norm
/// before λ-scaling is therefore ‖τ_l‖²/σ_n. Biases stay θ_vlm's. The
/// evaluator maps a merged model to (taskV score, taskR score).
pub fn rank_injection_sweep(
    vlm: &ModelParams,
    tau_lrm: &TaskVector,
    ranks: &[usize],
    lambdas: &[f64],
    mut eval: impl FnMut(&ModelParams) -> Result<(f64, f64)>,
) -> Result<SweepResult> {
    if ranks.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one rank and one lambda".into()));
    }
    // Per-layer SVD once; cells reuse the factors.
    struct LayerSvd {
        name: String,
        u: Tensor,
        s: Tensor,
        vt: Tensor,
        norm_sq: f64,
        rank: usize,
    }
    let mut layers = Vec::new();
    for name in vlm.arch.merged_weight_names() {
        let t = tau_lrm
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Incompatible(format!("missing tensor '{name}'")))?;
        let f = svd(t)?;
        layers.push(LayerSvd {
            name,
            norm_sq: t.frob_norm_sq(),
            rank: f.rank,
            u: f.u,
            s: f.s,
            vt: f.vt,
        });
    }
    for &n in ranks {
        for l in &layers {
            if n >= l.rank {
                return Err(Error::Range(format!(
                    "rank {n} outside the effective rank {} of layer '{}'",
                    l.rank, l.name
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(ranks.len() * lambdas.len());
    for &n in ranks {
        for &lambda in lambdas {
            if !lambda.is_finite() {
                return Err(Error::Domain(format!("non-finite lambda {lambda}")));
            }
            let mut merged = vlm.clone();
            for l in &layers {
                let sigma = l.s.data()[n] as f64;
                let scale = l.norm_sq / (sigma * sigma) * lambda;
                let out = merged.tensors.get_mut(&l.name).expect("merged layer");
                let (rows_w, cols_w) = (out.rows(), out.cols());
                for i in 0..rows_w {
                    let ui = l.u.at(i, n) as f64;
                    if ui == 0.0 {
                        continue;
                    }
                    for j in 0..cols_w {
                        let comp = ui * sigma * (l.vt.at(n, j) as f64);
                        let w = out.at(i, j) as f64 + comp * scale;
                        out.set(i, j, w as f32);
                    }
                }
            }
            merged.provenance = Provenance::Merged;
            let (sv, sr) = eval(&merged)?;
            rows.push(SweepRow {
                rank: n,
                lambda,
                layer_set: "all".into(),
                score_task_v: sv,
                score_task_r: sr,
            });
        }
    }
    Ok(SweepResult { rows })
}

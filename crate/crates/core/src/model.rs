//! The toy network: a small tanh MLP with a softmax head.
//!
//! Default architecture is 16→32→32→4. The first dense layer is named
//! `adapter` and stands in for a frozen input tower: it is listed in
//! `frozen_layers` and is excluded from merging. The remaining dense layers
//! are `layer0..layerN-1`, where the last maps to the output classes.
//! Weight tensors are `{name}.w` with shape [out, in]; biases are `{name}.b`.
//!
//! A layer name `P` counts as frozen when `P.w` appears in `frozen_layers`;
//! the bias `P.b` freezes with its weight.

use crate::error::{Error, Result};
use crate::mathx;
use crate::rng::PortableRng;
use crate::tensor::{Tensor, MAX_DIM};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Base,
    Vlm,
    Lrm,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub output_classes: usize,
    pub activation: Activation,
    pub frozen_layers: BTreeSet<String>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_dim: 16,
            hidden_dim: 32,
            num_hidden_layers: 2,
            output_classes: 4,
            activation: Activation::Tanh,
            frozen_layers: ["adapter.w".to_string()].into_iter().collect(),
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        for (label, d) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_classes", self.output_classes),
        ] {
            if d == 0 {
                return Err(Error::Config(format!("{label} must be positive")));
            }
            if d > MAX_DIM {
                return Err(Error::Config(format!("{label}={d} exceeds {MAX_DIM}")));
            }
        }
        if self.num_hidden_layers == 0 {
            return Err(Error::Config("num_hidden_layers must be at least 1".into()));
        }
        if self.num_hidden_layers > 9 {
            // Keeps lexicographic tensor-name order aligned with layer order.
            return Err(Error::Config("num_hidden_layers is capped at 9".into()));
        }
        let names: BTreeSet<String> = self.tensor_names().into_iter().collect();
        for f in &self.frozen_layers {
            if !names.contains(f) {
                return Err(Error::Config(format!(
                    "frozen layer '{f}' is not a declared tensor"
                )));
            }
        }
        Ok(())
    }

    /// Dense layers in forward order as (name, out_dim, in_dim).
    pub fn layer_dims(&self) -> Vec<(String, usize, usize)> {
        let mut v = vec![("adapter".to_string(), self.hidden_dim, self.input_dim)];
        for i in 0..self.num_hidden_layers {
            let out = if i + 1 == self.num_hidden_layers {
                self.output_classes
            } else {
                self.hidden_dim
            };
            v.push((format!("layer{i}"), out, self.hidden_dim));
        }
        v
    }

    /// All tensor names in lexicographic order (the serialization order).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .layer_dims()
            .iter()
            .flat_map(|(n, _, _)| [format!("{n}.w"), format!("{n}.b")])
            .collect();
        names.sort();
        names
    }

    pub fn tensor_shape(&self, name: &str) -> Result<Vec<usize>> {
        for (layer, out, inp) in self.layer_dims() {
            if name == format!("{layer}.w") {
                return Ok(vec![out, inp]);
            }
            if name == format!("{layer}.b") {
                return Ok(vec![out]);
            }
        }
        Err(Error::Range(format!("unknown tensor name '{name}'")))
    }

    /// Frozen status applies to a whole layer: `P.w` in the frozen set
    /// freezes both `P.w` and `P.b`.
    pub fn is_frozen(&self, tensor_name: &str) -> bool {
        let prefix = tensor_name
            .strip_suffix(".w")
            .or_else(|| tensor_name.strip_suffix(".b"))
            .unwrap_or(tensor_name);
        self.frozen_layers.contains(&format!("{prefix}.w"))
    }

    /// Weight tensors participating in merging (non-frozen `.w` tensors),
    /// in lexicographic order.
    pub fn merged_weight_names(&self) -> Vec<String> {
        self.tensor_names()
            .into_iter()
            .filter(|n| n.ends_with(".w") && !self.is_frozen(n))
            .collect()
    }
}

/// Row-major f64 matrix used for all forward/backward arithmetic.
///
/// Weights are stored as f32 [`Tensor`]s, but every activation, probability,
/// loss, and gradient is computed in f64 so that finite-difference checks at
/// step 1e-3 are not drowned by storage rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Mat> {
        if t.ndim() == 1 {
            return Ok(Mat {
                rows: 1,
                cols: t.len(),
                data: t.data().iter().map(|&v| v as f64).collect(),
            });
        }
        if t.ndim() != 2 {
            return Err(Error::Shape(format!(
                "expected a vector or matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok(Mat {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        })
    }

    /// Round to f32 storage.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(
            &[self.rows, self.cols],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// self (r×k) · other (k×c) → r×c.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self.data[i * self.cols + l];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[l * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    /// self (r×k) · otherᵀ (m×k) → r×m.
    pub fn matmul_nt(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_nt {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for l in 0..self.cols {
                    acc += self.data[i * self.cols + l] * other.data[j * other.cols + l];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// selfᵀ (k×r viewed from r×k) · other (r×c) → k×c.
    pub fn matmul_tn(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_tn {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[r * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[r * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    /// Add a length-`cols` bias row to every row.
    pub fn add_row(&self, bias: &Mat) -> Result<Mat> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape(format!(
                "bias {}x{} against matrix {}x{}",
                bias.rows, bias.cols, self.rows, self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += bias.data[j];
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            let mut max = f64::NEG_INFINITY;
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = mathx::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Column sums as a 1×cols matrix.
    pub fn sum_rows(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j] += self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// Forward-pass intermediates needed by the backward pass.
pub struct Trace {
    /// acts[0] is the input batch; acts[i] is the post-activation output of
    /// the i-th dense layer (the last entry is the softmax probabilities).
    pub acts: Vec<Mat>,
}

impl Trace {
    /// The softmax probabilities in f64.
    pub fn probs(&self) -> &Mat {
        self.acts.last().expect("trace always holds the input")
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ArchSpec,
    pub tensors: BTreeMap<String, Tensor>,
    pub provenance: Provenance,
}

impl ModelParams {
    /// Random initialization: Xavier-uniform weights in ±√(6/(fan_in+fan_out))
    /// and biases uniform in ±0.3. Nonzero biases matter: tanh is odd, and a
    /// bias-free net has no even-order terms, which cripples tasks built on
    /// products of inputs. Draws happen in forward layer order (weights then
    /// bias per layer, row-major), so a seed pins every bit.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
        arch.validate()?;
        let mut rng = PortableRng::new(seed);
        let mut tensors = BTreeMap::new();
        for (layer, out, inp) in arch.layer_dims() {
            let bound = (6.0 / (out + inp) as f64).sqrt();
            let mut w = Tensor::zeros(&[out, inp])?;
            for v in w.data_mut() {
                *v = rng.uniform(-bound, bound) as f32;
            }
            let mut b = Tensor::zeros(&[out])?;
            for v in b.data_mut() {
                *v = rng.uniform(-0.3, 0.3) as f32;
            }
            tensors.insert(format!("{layer}.w"), w);
            tensors.insert(format!("{layer}.b"), b);
        }
        Ok(ModelParams {
            arch: arch.clone(),
            tensors,
            provenance: Provenance::Base,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let expect = self.arch.tensor_names();
        let have: Vec<String> = self.tensors.keys().cloned().collect();
        if expect != have {
            return Err(Error::Incompatible(format!(
                "tensor set {have:?} does not match architecture's {expect:?}"
            )));
        }
        for (name, t) in &self.tensors {
            let shape = self.arch.tensor_shape(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            t.ensure_finite(name)?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Range(format!("missing tensor '{name}'")))
    }

    /// Class probabilities for a batch (rows sum to 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let weights = self.weight_mats()?;
        let trace = forward_trace_mats(&self.arch, &weights, &Mat::from_tensor(x)?)?;
        let probs = trace.probs().to_tensor()?;
        Ok((probs, trace))
    }

    /// All tensors lifted to f64 matrices (biases as 1×n rows).
    pub fn weight_mats(&self) -> Result<BTreeMap<String, Mat>> {
        self.tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), Mat::from_tensor(t)?)))
            .collect()
    }

    /// Gradients of a scalar loss with respect to every weight and bias,
    /// given dL/dprobs for the traced batch. Softmax and tanh are chained
    /// internally; frozen layers still receive gradients (callers choose
    /// whether to apply them).
    pub fn backward(&self, trace: &Trace, dprobs: &Mat) -> Result<BTreeMap<String, Tensor>> {
        let weights = self.weight_mats()?;
        let grads = backward_mats(&self.arch, &weights, trace, dprobs)?;
        grads
            .into_iter()
            .map(|(name, g)| {
                let t = if name.ends_with(".b") {
                    Tensor::from_vec(&[g.cols()], g.data().iter().map(|&v| v as f32).collect())?
                } else {
                    g.to_tensor()?
                };
                Ok((name, t))
            })
            .collect()
    }
}

fn mat_for<'a>(weights: &'a BTreeMap<String, Mat>, name: &str) -> Result<&'a Mat> {
    weights
        .get(name)
        .ok_or_else(|| Error::Range(format!("missing tensor '{name}'")))
}

/// Forward pass over f64 weights. The weight map holds one Mat per tensor
/// name; callers that merge in f64 (gated structures) reuse this path so the
/// training-time network never rounds through f32.
pub fn forward_trace_mats(
    arch: &ArchSpec,
    weights: &BTreeMap<String, Mat>,
    x: &Mat,
) -> Result<Trace> {
    if x.cols() != arch.input_dim {
        return Err(Error::Shape(format!(
            "input width {} does not match input_dim {}",
            x.cols(),
            arch.input_dim
        )));
    }
    let dims = arch.layer_dims();
    let mut acts = vec![x.clone()];
    for (idx, (layer, _, _)) in dims.iter().enumerate() {
        let w = mat_for(weights, &format!("{layer}.w"))?;
        let b = mat_for(weights, &format!("{layer}.b"))?;
        let pre = acts[idx].matmul_nt(w)?.add_row(b)?;
        let h = if idx + 1 == dims.len() {
            pre.softmax_rows()
        } else {
            pre.map(mathx::tanh)
        };
        acts.push(h);
    }
    Ok(Trace { acts })
}

/// Backward pass matching [`forward_trace_mats`], returning f64 gradients
/// per tensor name (bias gradients as 1×n rows).
pub fn backward_mats(
    arch: &ArchSpec,
    weights: &BTreeMap<String, Mat>,
    trace: &Trace,
    dprobs: &Mat,
) -> Result<BTreeMap<String, Mat>> {
    let dims = arch.layer_dims();
    if trace.acts.len() != dims.len() + 1 {
        return Err(Error::Shape(format!(
            "trace holds {} activations, expected {}",
            trace.acts.len(),
            dims.len() + 1
        )));
    }
    let probs = &trace.acts[dims.len()];
    if dprobs.rows() != probs.rows() || dprobs.cols() != probs.cols() {
        return Err(Error::Shape(format!(
            "upstream gradient shape {}x{} vs probabilities {}x{}",
            dprobs.rows(),
            dprobs.cols(),
            probs.rows(),
            probs.cols()
        )));
    }
    let (n, c) = (probs.rows(), probs.cols());
    // Through softmax: dlogit_k = p_k (up_k − Σ_c up_c p_c).
    let mut dlogits = Mat::zeros(n, c);
    for i in 0..n {
        let mut dot = 0.0f64;
        for k in 0..c {
            dot += dprobs.at(i, k) * probs.at(i, k);
        }
        for k in 0..c {
            dlogits.set(i, k, probs.at(i, k) * (dprobs.at(i, k) - dot));
        }
    }

    let mut grads = BTreeMap::new();
    let mut dcur = dlogits; // gradient w.r.t. current layer's pre-activation
    for idx in (0..dims.len()).rev() {
        let (layer, _, _) = &dims[idx];
        let input_act = &trace.acts[idx];
        grads.insert(format!("{layer}.w"), dcur.matmul_tn(input_act)?);
        grads.insert(format!("{layer}.b"), dcur.sum_rows());
        if idx > 0 {
            // d(input activation), then through that layer's tanh.
            let w = mat_for(weights, &format!("{layer}.w"))?;
            let mut dpre = dcur.matmul(w)?;
            for (v, a) in dpre.data_mut().iter_mut().zip(input_act.data()) {
                *v *= 1.0 - a * a;
            }
            dcur = dpre;
        }
    }
    Ok(grads)
}

/// Mean cross-entropy −(1/n)·Σ ln p[label]; probabilities are floored at
/// 1e-12 before the log.
pub fn cross_entropy(probs: &Mat, labels: &[usize]) -> Result<f64> {
    let (n, c) = (probs.rows(), probs.cols());
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "labels length {} vs batch size {n}",
            labels.len()
        )));
    }
    let mut acc = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Range(format!("label {y} out of range 0..{c}")));
        }
        acc -= mathx::ln(probs.at(i, y).max(PROB_FLOOR))?;
    }
    Ok(acc / n as f64)
}

/// dL/dprobs for mean cross-entropy (zero where flooring clipped).
pub fn cross_entropy_grad(probs: &Mat, labels: &[usize]) -> Result<Mat> {
    let (n, c) = (probs.rows(), probs.cols());
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "labels length {} vs batch size {n}",
            labels.len()
        )));
    }
    let mut g = Mat::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Range(format!("label {y} out of range 0..{c}")));
        }
        let p = probs.at(i, y);
        if p > PROB_FLOOR {
            g.set(i, y, -1.0 / (n as f64 * p));
        }
    }
    Ok(g)
}

/// Probability floor applied before every logarithm in the crate.
pub const PROB_FLOOR: f64 = 1e-12;

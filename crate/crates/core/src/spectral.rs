//! Closed-form gate-dynamics simulator on constructed quadratic landscapes,
//! plus curvature estimation for real checkpoints.
//!
//! Each rank-one update direction B_i is summarized by two scalars: the
//! projected curvature h_i = Tr(B_iᵀ H B_i) of the frozen teacher loss and
//! the squared norm ‖B_i‖_F². Under the decoupled (diagonal) approximation
//! the loss restricted to gate coefficients λ is the quadratic
//! L(λ) = Σ_i (½·h_i − α·‖B_i‖_F²)·λ_i²,
//! whose gradient, regime boundary, and gate dynamics are all known exactly,
//! so the trained-gate behavior of the full system can be checked against an
//! analytic oracle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::frism::SubspaceDecomposition;
use crate::mathx::{sigmoid, sigmoid_prime};
use crate::merge::TaskVector;
use crate::model::{
    backward_mats, cross_entropy, cross_entropy_grad, forward_trace_mats, Mat, ModelParams,
};
use crate::task::Batch;
use crate::tensor::Tensor;

/// Finite-difference step for Hessian-vector products along unit directions.
pub const CURVATURE_FD_STEP: f64 = 1e-3;

/// Gate magnitude beyond which the dynamics are declared divergent.
pub const DIVERGENCE_BOUND: f64 = 100.0;

/// A gate-coefficient loss surface with every quantity known in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLandscape {
    /// Projected curvatures h_i = Tr(B_iᵀ H B_i), one per subspace.
    pub curvatures: Vec<f64>,
    /// Squared Frobenius norms ‖B_i‖_F² of the update directions.
    pub subspace_norms_sq: Vec<f64>,
    /// Weight of the norm-growing term in the training objective.
    pub alpha: f64,
    /// Upper bound of the sigmoid parametrization λ_i = lambda_lrm·σ(g_i).
    pub lambda_lrm: f64,
}

impl QuadraticLandscape {
    /// Curvatures must be nonnegative (the teacher sits at a local minimum,
    /// so the Hessian is positive semidefinite along every subspace) and
    /// norms strictly positive.
    pub fn new(
        curvatures: Vec<f64>,
        subspace_norms_sq: Vec<f64>,
        alpha: f64,
        lambda_lrm: f64,
    ) -> Result<Self> {
        if curvatures.len() != subspace_norms_sq.len() {
            return Err(Error::Shape(format!(
                "{} curvatures vs {} norms",
                curvatures.len(),
                subspace_norms_sq.len()
            )));
        }
        if curvatures.is_empty() {
            return Err(Error::Shape("landscape needs at least one subspace".into()));
        }
        for (i, &h) in curvatures.iter().enumerate() {
            if !(h >= 0.0) || !h.is_finite() {
                return Err(Error::Domain(format!("curvature[{i}] = {h}, need >= 0")));
            }
        }
        for (i, &n) in subspace_norms_sq.iter().enumerate() {
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Domain(format!("norm_sq[{i}] = {n}, need > 0")));
            }
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!("alpha = {alpha}, need >= 0")));
        }
        if !(lambda_lrm > 0.0) || !lambda_lrm.is_finite() {
            return Err(Error::Domain(format!("lambda_lrm = {lambda_lrm}, need > 0")));
        }
        Ok(Self {
            curvatures,
            subspace_norms_sq,
            alpha,
            lambda_lrm,
        })
    }

    pub fn len(&self) -> usize {
        self.curvatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curvatures.is_empty()
    }

    /// Regime margin h_i − 2α‖B_i‖² per subspace; positive means the
    /// curvature penalty beats the norm reward and the gate is pushed shut.
    pub fn margins(&self) -> Vec<f64> {
        self.curvatures
            .iter()
            .zip(&self.subspace_norms_sq)
            .map(|(&h, &n)| h - 2.0 * self.alpha * n)
            .collect()
    }

    /// The decoupled quadratic loss Σ (½h_i − α‖B_i‖²)·λ_i².
    pub fn loss(&self, lambda: &[f64]) -> Result<f64> {
        self.check_len(lambda)?;
        let mut acc = 0.0f64;
        for i in 0..self.len() {
            acc += (0.5 * self.curvatures[i] - self.alpha * self.subspace_norms_sq[i])
                * lambda[i]
                * lambda[i];
        }
        Ok(acc)
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::Shape(format!(
                "vector length {} vs {} subspaces",
                v.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Which side of the margin a subspace sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// margin > 0: gradient descent drives the gate toward zero.
    Suppression,
    /// margin <= 0: the gate grows until the sigmoid saturates.
    Injection,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Suppression => "suppression",
            Regime::Injection => "injection",
        }
    }
}

/// Per-subspace margin sign test.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePrediction {
    pub regimes: Vec<Regime>,
    /// h_i − 2α‖B_i‖², the quantity whose sign decides the regime.
    pub margins: Vec<f64>,
}

/// ∂L/∂λ_i = (h_i − 2α‖B_i‖²)·λ_i of the decoupled quadratic.
pub fn closed_form_gradient(land: &QuadraticLandscape, lambda: &[f64]) -> Result<Vec<f64>> {
    land.check_len(lambda)?;
    Ok(land
        .margins()
        .iter()
        .zip(lambda)
        .map(|(&m, &l)| m * l)
        .collect())
}

/// Sign test on the margins: suppression iff h_i > 2α‖B_i‖².
pub fn classify_regimes(land: &QuadraticLandscape) -> RegimePrediction {
    let margins = land.margins();
    let regimes = margins
        .iter()
        .map(|&m| {
            if m > 0.0 {
                Regime::Suppression
            } else {
                Regime::Injection
            }
        })
        .collect();
    RegimePrediction { regimes, margins }
}

/// Recorded σ(g) states of a simulated descent, one row per step plus the
/// initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrajectory {
    pub states: Vec<Vec<f64>>,
}

impl GateTrajectory {
    /// The σ(g) vector after the final step.
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory holds the init state")
    }

    /// CSV with one row per recorded state: "step,gate_0,...,gate_{n-1}".
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("step");
        for i in 0..n {
            out.push_str(&format!(",gate_{i}"));
        }
        out.push('\n');
        for (step, row) in self.states.iter().enumerate() {
            out.push_str(&format!("{step}"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Plain gradient descent on the decoupled quadratic through the sigmoid
/// parametrization λ_i = lambda_lrm·σ(g_i), so each coordinate follows
/// dL/dg_i = (h_i − 2α‖B_i‖²)·lambda_lrm²·σ(g_i)·σ'(g_i).
/// Zero-margin coordinates have exactly zero gradient and never move. The
/// sigmoid keeps every trajectory inside (0, 1); a raw gate magnitude above
/// `DIVERGENCE_BOUND` aborts with a diagnostic instead of looping on a
/// saturated coordinate.
pub fn simulate_gate_dynamics(
    land: &QuadraticLandscape,
    g_init: &[f64],
    lr: f64,
    steps: usize,
) -> Result<GateTrajectory> {
    land.check_len(g_init)?;
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Domain(format!("learning rate {lr}, need > 0")));
    }
    if steps == 0 {
        return Err(Error::Range("steps must be positive".into()));
    }
    let margins = land.margins();
    let ll2 = land.lambda_lrm * land.lambda_lrm;
    let mut g = g_init.to_vec();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(g.iter().map(|&gi| sigmoid(gi)).collect::<Vec<f64>>());
    for step in 0..steps {
        for i in 0..g.len() {
            let grad = margins[i] * ll2 * sigmoid(g[i]) * sigmoid_prime(g[i]);
            g[i] -= lr * grad;
            if g[i].abs() > DIVERGENCE_BOUND {
                return Err(Error::Domain(format!(
                    "gate {i} diverged to {} at step {step}; reduce the learning rate",
                    g[i]
                )));
            }
        }
        states.push(g.iter().map(|&gi| sigmoid(gi)).collect());
    }
    Ok(GateTrajectory { states })
}

/// Exact squared distance J(λ) = ‖Σ(1−λ_i)·B_i − τ_vlm‖_F² between the
/// reasoning checkpoint and the merged one, together with the cross term
/// ⟨Σ(1−λ_i)·B_i, τ_vlm⟩ whose smallness the decoupled theory assumes. The
/// cross term is reported, never presumed zero.
pub fn distance_proxy(
    components: &[Tensor],
    tau_vlm: &Tensor,
    lambda: &[f64],
) -> Result<(f64, f64)> {
    if components.len() != lambda.len() {
        return Err(Error::Shape(format!(
            "{} components vs {} coefficients",
            components.len(),
            lambda.len()
        )));
    }
    let len = tau_vlm.len();
    for (i, c) in components.iter().enumerate() {
        if c.shape() != tau_vlm.shape() {
            return Err(Error::Shape(format!(
                "component {i} shape {:?} vs {:?}",
                c.shape(),
                tau_vlm.shape()
            )));
        }
        let _ = i;
    }
    let mut residual = vec![0.0f64; len];
    for (c, &l) in components.iter().zip(lambda) {
        let w = 1.0 - l;
        for (r, &e) in residual.iter_mut().zip(c.data()) {
            *r += w * (e as f64);
        }
    }
    let mut j = 0.0f64;
    let mut cross = 0.0f64;
    for (r, &t) in residual.iter().zip(tau_vlm.data()) {
        let t = t as f64;
        let d = r - t;
        j += d * d;
        cross += r * t;
    }
    Ok((j, cross))
}

/// The retained rank-one components B_i = s_i·u_i·v_iᵀ of one decomposed
/// layer, materialized as full matrices (used by the distance proxy and the
/// cross-term report).
pub fn layer_components(d: &SubspaceDecomposition, layer: &str) -> Result<Vec<Tensor>> {
    let l = d
        .layers
        .get(layer)
        .ok_or_else(|| Error::Config(format!("unknown layer {layer:?}")))?;
    let (m, n) = (l.u.rows(), l.vt.cols());
    let mut out = Vec::with_capacity(l.rank);
    for i in 0..l.rank {
        let s = l.s.data()[i] as f64;
        let mut b = vec![0.0f32; m * n];
        for a in 0..m {
            let ua = l.u.data()[a * l.rank + i] as f64;
            for c in 0..n {
                b[a * n + c] = (s * ua * (l.vt.data()[i * n + c] as f64)) as f32;
            }
        }
        out.push(Tensor::from_vec(&[m, n], b)?);
    }
    Ok(out)
}

/// Normalized alignments |⟨B_i, τ_vlm⟩|/(‖B_i‖·‖τ_vlm‖) per decomposed
/// layer. These measure the orthogonality hypothesis behind the distance
/// proxy; they are reported, not thresholded. Zero-norm pairs report 0.
pub fn cross_term_report(
    d: &SubspaceDecomposition,
    tau_vlm: &TaskVector,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (layer, l) in &d.layers {
        let name = format!("{layer}.w");
        let tv = tau_vlm
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Incompatible(format!("task vector lacks {name:?}")))?;
        let tv_norm = tv.frob_norm_sq().sqrt();
        let mut per = Vec::with_capacity(l.rank);
        for b in layer_components(d, layer)? {
            let b_norm = b.frob_norm_sq().sqrt();
            if b_norm == 0.0 || tv_norm == 0.0 {
                per.push(0.0);
                continue;
            }
            let mut dot = 0.0f64;
            for (&x, &y) in b.data().iter().zip(tv.data()) {
                dot += (x as f64) * (y as f64);
            }
            per.push(dot.abs() / (b_norm * tv_norm));
        }
        out.insert(layer.clone(), per);
    }
    Ok(out)
}

/// ⟨A, H·B⟩ where H is the Hessian of the mean cross-entropy of `params` on
/// `batch`, restricted to one layer's weight matrix. The product H·B is
/// formed by a central finite difference of the loss gradient along B/‖B‖
/// with step `CURVATURE_FD_STEP`.
pub fn hessian_quadratic_form(
    params: &ModelParams,
    layer: &str,
    dir_a: &Mat,
    dir_b: &Mat,
    batch: &Batch,
) -> Result<f64> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("curvature estimation needs a labeled batch".into()))?;
    let weights = params.weight_mats()?;
    let wname = format!("{layer}.w");
    let base = weights
        .get(&wname)
        .ok_or_else(|| Error::Config(format!("unknown layer {layer:?}")))?;
    if dir_a.rows() != base.rows()
        || dir_a.cols() != base.cols()
        || dir_b.rows() != base.rows()
        || dir_b.cols() != base.cols()
    {
        return Err(Error::Shape(format!(
            "direction shape vs layer {}x{}",
            base.rows(),
            base.cols()
        )));
    }
    let b_norm = frob(dir_b).sqrt();
    if b_norm == 0.0 {
        return Ok(0.0);
    }
    let x = Mat::from_tensor(&batch.inputs)?;
    // grad(θ + t·B̂) projected onto A, for t = ±ε.
    let probe = |t: f64| -> Result<f64> {
        let mut w = weights.clone();
        let wt = w.get_mut(&wname).expect("checked above");
        for (e, d) in wt.data_mut().iter_mut().zip(dir_b.data()) {
            *e += t * d / b_norm;
        }
        let trace = forward_trace_mats(&params.arch, &w, &x)?;
        let dprobs = cross_entropy_grad(trace.probs(), labels)?;
        let grads = backward_mats(&params.arch, &w, &trace, &dprobs)?;
        let g = &grads[&wname];
        let mut dot = 0.0f64;
        for (&gv, &av) in g.data().iter().zip(dir_a.data()) {
            dot += gv * av;
        }
        Ok(dot)
    };
    let plus = probe(CURVATURE_FD_STEP)?;
    let minus = probe(-CURVATURE_FD_STEP)?;
    // (⟨A, ∇L(θ+εB̂)⟩ − ⟨A, ∇L(θ−εB̂)⟩)/(2ε) = ⟨A, H·B̂⟩; rescale by ‖B‖.
    Ok((plus - minus) / (2.0 * CURVATURE_FD_STEP) * b_norm)
}

/// Projected curvatures h_i = Tr(B_iᵀ H B_i) for every retained subspace of
/// one decomposed layer, where H is the Hessian of `params`' cross-entropy
/// on `batch`. Zero singular values contribute h_i = 0. Values are measured,
/// not clamped: slightly negative estimates near a finite-sample minimum are
/// the caller's to interpret.
pub fn estimate_curvatures(
    params: &ModelParams,
    d: &SubspaceDecomposition,
    layer: &str,
    batch: &Batch,
) -> Result<Vec<f64>> {
    let components = layer_components(d, layer)?;
    let mut out = Vec::with_capacity(components.len());
    for b in &components {
        if b.frob_norm_sq() == 0.0 {
            out.push(0.0);
            continue;
        }
        let dir = Mat::from_tensor(b)?;
        out.push(hessian_quadratic_form(params, layer, &dir, &dir, batch)?);
    }
    Ok(out)
}

/// Mean cross-entropy of `params` on a labeled batch (the loss whose
/// Hessian the curvature estimates probe).
pub fn teacher_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("teacher loss needs a labeled batch".into()))?;
    let trace = params.forward_trace(&batch.inputs)?;
    cross_entropy(trace.1.probs(), labels)
}

/// Regime map CSV: one row per subspace, columns
/// subspace_index,h,norm_sq,alpha,margin,regime,final_gate.
pub fn regime_csv(
    land: &QuadraticLandscape,
    pred: &RegimePrediction,
    final_gates: &[f64],
) -> Result<String> {
    land.check_len(final_gates)?;
    if pred.regimes.len() != land.len() {
        return Err(Error::Shape(format!(
            "{} regimes vs {} subspaces",
            pred.regimes.len(),
            land.len()
        )));
    }
    let mut out = String::from("subspace_index,h,norm_sq,alpha,margin,regime,final_gate\n");
    for i in 0..land.len() {
        out.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            land.curvatures[i],
            land.subspace_norms_sq[i],
            land.alpha,
            pred.margins[i],
            pred.regimes[i].as_str(),
            final_gates[i]
        ));
    }
    Ok(out)
}

fn frob(m: &Mat) -> f64 {
    m.data().iter().map(|&v| v * v).sum()
}

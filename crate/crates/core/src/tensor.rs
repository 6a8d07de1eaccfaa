//! Dense tensors (rank 1 and 2) with f32 storage and a deterministic SVD.
//!
//! Storage is a flat row-major `Vec<f32>`. Every reduction (dot products,
//! norms, matrix products) accumulates in f64 before rounding back to f32,
//! so results are independent of any blocking or vectorization choices and
//! reproduce bit-for-bit across platforms.
//!
//! The SVD is a one-sided Jacobi: right-multiplied Givens rotations
//! orthogonalize the columns of A in a fixed (p, q) sweep order, with the
//! rotation threshold |a_pq| ≤ 1e-10·√(a_pp·a_qq) serving as the convergence
//! test on relative off-diagonal mass. Fixed order + f64 internals make the
//! factorization deterministic. Sign convention: the largest-magnitude entry
//! of each left singular vector is nonnegative (ties broken by lowest index),
//! which pins an otherwise arbitrary per-pair sign.

use crate::error::{Error, Result};
use crate::mathx;
use serde::{Deserialize, Serialize};

/// Hard cap on either dimension; callers operate at desk scale.
pub const MAX_DIM: usize = 4096;

/// Jacobi rotation threshold on relative off-diagonal mass.
const JACOBI_TOL: f64 = 1e-10;

/// Safety bound on sweeps; convergence at toy sizes takes well under 20.
const MAX_SWEEPS: usize = 64;

/// Singular values at or below `σ_max · RANK_EPS` count as zero.
const RANK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape)?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn identity(n: usize) -> Result<Tensor> {
        let mut t = Tensor::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Rank-1 matrix u·vᵀ.
    pub fn outer(u: &[f32], v: &[f32]) -> Result<Tensor> {
        let mut t = Tensor::zeros(&[u.len(), v.len()])?;
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                t.data[i * v.len() + j] = ((ui as f64) * (vj as f64)) as f32;
            }
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; a vector is treated as a single row.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// True when every stored bit matches (distinguishes -0.0 from +0.0 and
    /// treats NaN payloads literally, unlike `==`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn ensure_finite(&self, name: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "tensor '{name}' has non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m])?;
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// Elementwise map through an f64-valued function.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x as f64) as f32).collect(),
        }
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(mathx::sigmoid)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a as f64, b as f64) as f32)
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    /// Σ a_i·b_i in f64.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "dot: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += (*a as f64) * (*b as f64);
        }
        Ok(acc)
    }

    /// Squared Frobenius norm in f64.
    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    /// A·B with f64 accumulation.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims(self, "matmul lhs")?;
        let (k2, n) = mat_dims(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?}·{:?})",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, n])?;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += (self.data[i * k + t] as f64) * (other.data[t * n + j] as f64);
                }
                out.data[i * n + j] = acc as f32;
            }
        }
        Ok(out)
    }

    /// A·Bᵀ without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims(self, "matmul_nt lhs")?;
        let (n, k2) = mat_dims(other, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dims {k} vs {k2} (shapes {:?}·{:?}ᵀ)",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, n])?;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += (self.data[i * k + t] as f64) * (other.data[j * k2 + t] as f64);
                }
                out.data[i * n + j] = acc as f32;
            }
        }
        Ok(out)
    }

    /// Aᵀ·B without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = mat_dims(self, "matmul_tn lhs")?;
        let (k2, n) = mat_dims(other, "matmul_tn rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_tn: inner dims {k} vs {k2} (shapes {:?}ᵀ·{:?})",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, n])?;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += (self.data[t * m + i] as f64) * (other.data[t * n + j] as f64);
                }
                out.data[i * n + j] = acc as f32;
            }
        }
        Ok(out)
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = mat_dims(self, "add_row_broadcast lhs")?;
        if bias.ndim() != 1 || bias.len() != n {
            return Err(Error::Shape(format!(
                "add_row_broadcast: bias shape {:?} vs row width {n}",
                bias.shape
            )));
        }
        let mut out = self.clone();
        for i in 0..m {
            for j in 0..n {
                out.data[i * n + j] =
                    ((self.data[i * n + j] as f64) + (bias.data[j] as f64)) as f32;
            }
        }
        Ok(out)
    }

    /// Column sums of a matrix as a length-n vector (f64 accumulation).
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = mat_dims(self, "sum_rows")?;
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            for j in 0..n {
                acc[j] += self.data[i * n + j] as f64;
            }
        }
        Tensor::from_vec(&[n], acc.into_iter().map(|x| x as f32).collect())
    }

    /// Row-wise softmax with max subtraction; rows sum to 1.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = mat_dims(self, "softmax_rows")?;
        let mut out = self.clone();
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for &x in row {
                if (x as f64) > mx {
                    mx = x as f64;
                }
            }
            let mut exps = vec![0.0f64; n];
            let mut sum = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                let e = mathx::exp(x as f64 - mx);
                exps[j] = e;
                sum += e;
            }
            for j in 0..n {
                out.data[i * n + j] = (exps[j] / sum) as f32;
            }
        }
        Ok(out)
    }

    /// Softmax of a 1-D tensor.
    pub fn softmax_vec(&self) -> Result<Tensor> {
        if self.ndim() != 1 {
            return Err(Error::Shape(format!(
                "softmax_vec expects a vector, got {:?}",
                self.shape
            )));
        }
        let m = Tensor::from_vec(&[1, self.len()], self.data.clone())?;
        let s = m.softmax_rows()?;
        Tensor::from_vec(&[self.len()], s.data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::Shape(format!(
            "tensors are rank 1 or 2, got shape {shape:?}"
        )));
    }
    for &d in shape {
        if d == 0 {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if d > MAX_DIM {
            return Err(Error::Range(format!(
                "dimension {d} exceeds the supported maximum {MAX_DIM}"
            )));
        }
    }
    Ok(())
}

fn mat_dims(t: &Tensor, ctx: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Shape(format!(
            "{ctx} expects a matrix, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Thin SVD A = U·diag(s)·Vᵀ with r = min(m, n).
///
/// `u` is m×r with orthonormal columns, `s` holds singular values in
/// descending order (exact zeros below the rank threshold), `vt` is r×n with
/// orthonormal rows, and `rank` counts the nonzero singular values.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Tensor,
    pub vt: Tensor,
    pub rank: usize,
}

impl SvdResult {
    pub fn singular_values(&self) -> &[f32] {
        self.s.data()
    }
}

pub fn svd(a: &Tensor) -> Result<SvdResult> {
    if a.ndim() != 2 {
        return Err(Error::Shape(format!(
            "svd expects a matrix, got shape {:?}",
            a.shape()
        )));
    }
    a.ensure_finite("svd input")?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let (mut u, s, mut vt) = if m >= n {
        svd_tall(a)?
    } else {
        // A = (AᵀᵀΣ…): factor the tall transpose and swap the roles of U/V.
        let (ut, s, vtt) = svd_tall(&a.transpose()?)?;
        (cols_to_rows(&vtt)?, s, cols_to_rows(&ut)?)
    };
    apply_sign_convention(&mut u, &mut vt);
    let rank = s.data().iter().filter(|&&x| x != 0.0).count();
    Ok(SvdResult { u, s, vt, rank })
}

/// Transposes a matrix stored as rows of V into rows of Vᵀ (and vice versa).
fn cols_to_rows(t: &Tensor) -> Result<Tensor> {
    t.transpose()
}

/// One-sided Jacobi on a tall (m ≥ n) matrix. Returns (U m×n, s n, Vt n×n)
/// without the sign convention applied.
fn svd_tall(a: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    // Column-major f64 working copies: g[c][r], v[c][r].
    let mut g = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            g[j * m + i] = a.data()[i * n + j] as f64;
        }
    }
    let mut v = vec![0.0f64; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..m {
                    let gp = g[p * m + i];
                    let gq = g[q * m + i];
                    app += gp * gp;
                    aqq += gq * gq;
                    apq += gp * gq;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..m {
                    let gp = g[p * m + i];
                    let gq = g[q * m + i];
                    g[p * m + i] = c * gp - s * gq;
                    g[q * m + i] = s * gp + c * gq;
                }
                for i in 0..n {
                    let vp = v[p * n + i];
                    let vq = v[q * n + i];
                    v[p * n + i] = c * vp - s * vq;
                    v[q * n + i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the unsorted singular values.
    let mut sig = vec![0.0f64; n];
    for j in 0..n {
        let mut acc = 0.0f64;
        for i in 0..m {
            acc += g[j * m + i] * g[j * m + i];
        }
        sig[j] = acc.sqrt();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sig[y].partial_cmp(&sig[x]).unwrap().then(x.cmp(&y)));

    let sig_max = sig[order[0]];
    let zero_thresh = sig_max * RANK_EPS;

    let mut u_cols = vec![vec![0.0f64; m]; n];
    let mut s_out = vec![0.0f32; n];
    let mut vt_rows = vec![vec![0.0f64; n]; n];
    let mut deficient: Vec<usize> = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..n {
            vt_rows[slot][i] = v[j * n + i];
        }
        if sig[j] > zero_thresh && sig_max > 0.0 {
            s_out[slot] = sig[j] as f32;
            for i in 0..m {
                u_cols[slot][i] = g[j * m + i] / sig[j];
            }
        } else {
            s_out[slot] = 0.0;
            deficient.push(slot);
        }
    }

    // Complete U's null columns to an orthonormal basis: pick the standard
    // basis vector with the largest residual after projecting out every
    // finished column (deterministic argmax, first index wins ties), then
    // orthogonalize twice for stability.
    for &slot in &deficient {
        let mut best_c = 0usize;
        let mut best_norm = -1.0f64;
        for cand in 0..m {
            let mut w = vec![0.0f64; m];
            w[cand] = 1.0;
            project_out(&mut w, &u_cols, slot, &deficient);
            let norm = w.iter().map(|x| x * x).sum::<f64>();
            if norm > best_norm + 1e-15 {
                best_norm = norm;
                best_c = cand;
            }
        }
        let mut w = vec![0.0f64; m];
        w[best_c] = 1.0;
        project_out(&mut w, &u_cols, slot, &deficient);
        project_out(&mut w, &u_cols, slot, &deficient);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in w.iter_mut() {
            *x /= norm;
        }
        u_cols[slot] = w;
    }

    let mut u = Tensor::zeros(&[m, n])?;
    for j in 0..n {
        for i in 0..m {
            u.data_mut()[i * n + j] = u_cols[j][i] as f32;
        }
    }
    let s = Tensor::from_vec(&[n], s_out)?;
    let mut vt = Tensor::zeros(&[n, n])?;
    for j in 0..n {
        for i in 0..n {
            vt.data_mut()[j * n + i] = vt_rows[j][i] as f32;
        }
    }
    Ok((u, s, vt))
}

/// Removes the components of `w` along every column except `skip_slot`'s own
/// entry among still-unfilled slots.
fn project_out(w: &mut [f64], u_cols: &[Vec<f64>], skip_slot: usize, deficient: &[usize]) {
    for (j, col) in u_cols.iter().enumerate() {
        if j == skip_slot {
            continue;
        }
        // Unfilled later slots are all-zero vectors; projecting on them is a
        // no-op, but skip explicitly for clarity.
        if deficient.contains(&j) && col.iter().all(|&x| x == 0.0) {
            continue;
        }
        let d: f64 = w.iter().zip(col).map(|(a, b)| a * b).sum();
        for (wi, ci) in w.iter_mut().zip(col) {
            *wi -= d * ci;
        }
    }
}

/// Flips U columns (and matching Vt rows) so each left singular vector's
/// largest-magnitude entry is nonnegative.
fn apply_sign_convention(u: &mut Tensor, vt: &mut Tensor) {
    let (m, r) = (u.shape()[0], u.shape()[1]);
    let n = vt.shape()[1];
    for j in 0..r {
        let mut arg = 0usize;
        let mut best = -1.0f32;
        for i in 0..m {
            let a = u.at(i, j).abs();
            if a > best {
                best = a;
                arg = i;
            }
        }
        if u.at(arg, j) < 0.0 {
            for i in 0..m {
                let x = u.at(i, j);
                u.set(i, j, -x);
            }
            for i in 0..n {
                let x = vt.at(j, i);
                vt.set(j, i, -x);
            }
        }
    }
}

/// Keeps the top-k singular triples. k must lie in 1..=rank.
pub fn truncate(d: &SvdResult, k: usize) -> Result<SvdResult> {
    if k == 0 || k > d.rank {
        return Err(Error::Range(format!(
            "truncate k={k} outside 1..={} (effective rank)",
            d.rank
        )));
    }
    let (m, r) = (d.u.shape()[0], d.u.shape()[1]);
    let n = d.vt.shape()[1];
    let mut u = Tensor::zeros(&[m, k])?;
    for i in 0..m {
        for j in 0..k {
            u.data_mut()[i * k + j] = d.u.data()[i * r + j];
        }
    }
    let s = Tensor::from_vec(&[k], d.s.data()[..k].to_vec())?;
    let mut vt = Tensor::zeros(&[k, n])?;
    vt.data_mut().copy_from_slice(&d.vt.data()[..k * n]);
    Ok(SvdResult { u, s, vt, rank: k })
}

/// U·diag(s)·Vᵀ with f64 accumulation.
pub fn compose(u: &Tensor, s: &Tensor, vt: &Tensor) -> Result<Tensor> {
    let (m, r) = mat_dims(u, "compose u")?;
    let (r2, n) = mat_dims(vt, "compose vt")?;
    if s.ndim() != 1 || s.len() != r || r != r2 {
        return Err(Error::Shape(format!(
            "compose: u {:?}, s {:?}, vt {:?} are inconsistent",
            u.shape(),
            s.shape(),
            vt.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n])?;
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for k in 0..r {
                acc += (u.data()[i * r + k] as f64)
                    * (s.data()[k] as f64)
                    * (vt.data()[k * n + j] as f64);
            }
            out.data_mut()[i * n + j] = acc as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::PortableRng;

    fn random_matrix(m: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = PortableRng::new(seed);
        let data: Vec<f32> = (0..m * n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        Tensor::from_vec(&[m, n], data).unwrap()
    }

    fn assert_orthonormal_cols(t: &Tensor, tol: f64) {
        let gram = t.matmul_tn(t).unwrap();
        let r = gram.rows();
        for i in 0..r {
            for j in 0..r {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = gram.at(i, j) as f64;
                assert!(
                    (got - want).abs() < tol,
                    "gram[{i}][{j}] = {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let d = svd(&Tensor::identity(4).unwrap()).unwrap();
        for &s in d.singular_values() {
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(d.rank, 4);
    }

    #[test]
    fn diagonal_spectrum_is_sorted_absolute_values() {
        let mut a = Tensor::zeros(&[3, 3]).unwrap();
        a.set(0, 0, -3.0);
        a.set(1, 1, 2.0);
        a.set(2, 2, 0.5);
        let d = svd(&a).unwrap();
        let s = d.singular_values();
        assert!((s[0] - 3.0).abs() < 1e-5);
        assert!((s[1] - 2.0).abs() < 1e-5);
        assert!((s[2] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn rank_one_outer_product_spectrum() {
        // ‖u‖ = 2, ‖v‖ = 3 → leading singular value 6, rest exactly zero.
        let u = [1.2f32, 1.6];
        let v = [3.0f32, 0.0, 0.0];
        let a = Tensor::outer(&u, &v).unwrap();
        let d = svd(&a).unwrap();
        assert!((d.singular_values()[0] - 6.0).abs() < 1e-5);
        assert_eq!(d.singular_values()[1], 0.0);
        assert_eq!(d.rank, 1);
        assert_orthonormal_cols(&d.u, 1e-5);
    }

    #[test]
    fn reconstruction_and_orthogonality_random() {
        for (m, n, seed) in [(8usize, 5usize, 1u64), (5, 8, 2), (16, 16, 3), (1, 7, 4), (9, 1, 5)] {
            let a = random_matrix(m, n, seed);
            let d = svd(&a).unwrap();
            assert_eq!(d.u.shape(), &[m, m.min(n)]);
            assert_eq!(d.vt.shape(), &[m.min(n), n]);
            let rec = compose(&d.u, &d.s, &d.vt).unwrap();
            let err = rec.sub(&a).unwrap().frob_norm() / a.frob_norm().max(1e-30);
            assert!(err < 1e-5, "rel reconstruction error {err} at {m}x{n}");
            assert_orthonormal_cols(&d.u, 1e-4);
            let vt_t = d.vt.transpose().unwrap();
            assert_orthonormal_cols(&vt_t, 1e-4);
            // Descending spectrum.
            let s = d.singular_values();
            for w in s.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn svd_is_deterministic() {
        let a = random_matrix(12, 7, 99);
        let d1 = svd(&a).unwrap();
        let d2 = svd(&a).unwrap();
        assert!(d1.u.bitwise_eq(&d2.u));
        assert!(d1.s.bitwise_eq(&d2.s));
        assert!(d1.vt.bitwise_eq(&d2.vt));
    }

    #[test]
    fn sign_convention_pins_largest_entry_nonnegative() {
        for seed in 0..20u64 {
            let a = random_matrix(6, 4, 1000 + seed);
            let d = svd(&a).unwrap();
            let (m, r) = (d.u.shape()[0], d.u.shape()[1]);
            for j in 0..r {
                let mut arg = 0;
                let mut best = -1.0f32;
                for i in 0..m {
                    if d.u.at(i, j).abs() > best {
                        best = d.u.at(i, j).abs();
                        arg = i;
                    }
                }
                assert!(
                    d.u.at(arg, j) >= 0.0,
                    "seed {seed} col {j}: largest entry negative"
                );
            }
        }
    }

    #[test]
    fn transpose_spectrum_symmetry() {
        for seed in [11u64, 12, 13] {
            let a = random_matrix(10, 6, seed);
            let s1 = svd(&a).unwrap();
            let s2 = svd(&a.transpose().unwrap()).unwrap();
            let smax = s1.singular_values()[0] as f64;
            for (x, y) in s1.singular_values().iter().zip(s2.singular_values()) {
                assert!(
                    ((*x as f64) - (*y as f64)).abs() <= 1e-5 * smax.max(1.0),
                    "spectra differ: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn zero_matrix_gets_completed_basis() {
        let a = Tensor::zeros(&[5, 3]).unwrap();
        let d = svd(&a).unwrap();
        assert_eq!(d.rank, 0);
        assert!(d.singular_values().iter().all(|&s| s == 0.0));
        assert_orthonormal_cols(&d.u, 1e-6);
        let vt_t = d.vt.transpose().unwrap();
        assert_orthonormal_cols(&vt_t, 1e-6);
    }

    #[test]
    fn eckart_young_truncation_error() {
        let a = random_matrix(12, 9, 77);
        let d = svd(&a).unwrap();
        for k in [1usize, 3, 6] {
            let t = truncate(&d, k).unwrap();
            let rec = compose(&t.u, &t.s, &t.vt).unwrap();
            let err = rec.sub(&a).unwrap().frob_norm();
            let tail: f64 = d.singular_values()[k..]
                .iter()
                .map(|&s| (s as f64) * (s as f64))
                .sum::<f64>()
                .sqrt();
            assert!(
                (err - tail).abs() <= 1e-4 * a.frob_norm().max(1.0),
                "k={k}: err {err} vs tail {tail}"
            );
        }
    }

    #[test]
    fn truncate_rejects_out_of_range_rank() {
        let a = Tensor::outer(&[1.0, 2.0], &[1.0, 0.5, 0.25]).unwrap();
        let d = svd(&a).unwrap();
        assert_eq!(d.rank, 1);
        assert!(truncate(&d, 0).is_err());
        assert!(matches!(truncate(&d, 2), Err(Error::Range(_))));
        assert!(truncate(&d, 1).is_ok());
    }

    #[test]
    fn svd_rejects_bad_inputs() {
        let v = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(svd(&v), Err(Error::Shape(_))));
        let mut a = Tensor::zeros(&[2, 2]).unwrap();
        a.set(0, 0, f32::NAN);
        assert!(matches!(svd(&a), Err(Error::Domain(_))));
        assert!(matches!(
            Tensor::zeros(&[MAX_DIM + 1, 1]),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = random_matrix(4, 6, 5);
        let b = random_matrix(6, 3, 6);
        let c1 = a.matmul(&b).unwrap();
        let c2 = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        let c3 = a.transpose().unwrap().matmul_tn(&b).unwrap();
        assert!(c1.bitwise_eq(&c2));
        assert!(c1.bitwise_eq(&c3));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let a = random_matrix(5, 4, 31);
        let p = a.softmax_rows().unwrap();
        for i in 0..5 {
            let mut sum = 0.0f64;
            for j in 0..4 {
                let v = p.at(i, j);
                assert!(v > 0.0 && v < 1.0);
                sum += v as f64;
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
        // All-zero logits → uniform.
        let z = Tensor::zeros(&[2, 4]).unwrap().softmax_rows().unwrap();
        for j in 0..4 {
            assert!((z.at(0, j) - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn bitwise_eq_distinguishes_signed_zero() {
        let a = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![-0.0, 1.0]).unwrap();
        assert_eq!(a, b); // numeric equality
        assert!(!a.bitwise_eq(&b)); // bit equality
    }
}

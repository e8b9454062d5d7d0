//! Numerical primitives shared by the whole pipeline: a row-major f32
//! matrix, exact truncated SVD, rotary position embedding, softmax, and the
//! subspace similarity metric used to compare low-rank key factorizations.
//!
//! Storage is 32-bit throughout; every reduction (dot products, norms,
//! softmax sums) accumulates in 64-bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("invalid shape: {rows}x{cols} does not match data length {len}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rank {rank} out of range for {rows}x{cols} matrix")]
    RankOutOfRange { rank: usize, rows: usize, cols: usize },
    #[error("matrix contains a non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("head dim {head_dim} must be even for rotary embedding")]
    OddHeadDim { head_dim: usize },
    #[error("chunk size {chunk_size} does not divide sequence length {seq_len}")]
    ChunkMisaligned { chunk_size: usize, seq_len: usize },
    #[error("factor is rank-deficient: row {row} collapsed under orthonormalization")]
    RankDeficientFactor { row: usize },
    #[error("SVD failed to converge after {sweeps} sweeps")]
    SvdNotConverged { sweeps: usize },
}

// ── Matrix ──────────────────────────────────────────────────────────────────

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity-like rectangular matrix: ones on the main diagonal.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch { expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    /// New matrix holding columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend_from_slice(&row[start..end]);
        }
        Matrix { rows: self.rows, cols: width, data }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * other` with f64 accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0f64;
                for k in 0..self.cols {
                    acc += f64::from(self.get(i, k)) * f64::from(other.get(k, j));
                }
                out.set(i, j, acc as f32);
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<(), LinalgError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(LinalgError::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub fn norm_f64(a: &[f32]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// Cosine of the angle between two vectors; `None` when either has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = norm_f64(a);
    let nb = norm_f64(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot_f64(a, b) / (na * nb))
}

// ── Truncated SVD ───────────────────────────────────────────────────────────

/// Rank-`r` factorization `X ≈ left · right` where `left = U_r Σ_r` and
/// `right = V_rᵀ` come from the exact SVD, so the product is the best
/// rank-`r` Frobenius approximation and the rows of `right` are orthonormal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncatedSvd {
    /// `s × r`, equals `U_r Σ_r`.
    pub left: Matrix,
    /// `r × D`, equals `V_rᵀ`; rows orthonormal.
    pub right: Matrix,
    pub rank: usize,
    /// Leading singular values, non-increasing, length `rank`.
    pub singular_values: Vec<f32>,
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> Matrix {
        self.left.matmul(&self.right).expect("factor shapes agree")
    }
}

const SVD_MAX_SWEEPS: usize = 60;
const SVD_ORTHO_TOL: f64 = 1e-12;

/// Full SVD of `x` by one-sided (Hestenes) Jacobi rotations in f64.
///
/// Returns `(v, sigma)` where `v` is `D × D` with orthonormal columns (right
/// singular vectors) and `sigma` are all `min(s, D)`... singular values of
/// the column-orthogonalized working copy, unordered. Internal helper; the
/// public entry points sort and truncate.
fn hestenes_jacobi(x: &Matrix) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), LinalgError> {
    let rows = x.rows();
    let cols = x.cols();
    // Column-major f64 working copy W; rotations act on column pairs.
    let mut w: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| f64::from(x.get(i, j))).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let alpha: f64 = wp.iter().map(|a| a * a).sum();
                    let beta: f64 = wq.iter().map(|b| b * b).sum();
                    let gamma: f64 = wp.iter().zip(wq).map(|(a, b)| a * b).sum();
                    (alpha, beta, gamma)
                };
                if gamma.abs() <= SVD_ORTHO_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                // Jacobi rotation zeroing the off-diagonal Gram entry.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = w.split_at_mut(q);
                let (wp, wq) = (&mut head[p], &mut tail[0]);
                for i in 0..rows {
                    let a = wp[i];
                    let b = wq[i];
                    wp[i] = c * a - s * b;
                    wq[i] = s * a + c * b;
                }
                let (head, tail) = v.split_at_mut(q);
                let (vp, vq) = (&mut head[p], &mut tail[0]);
                for i in 0..cols {
                    let a = vp[i];
                    let b = vq[i];
                    vp[i] = c * a - s * b;
                    vq[i] = s * a + c * b;
                }
            }
        }
        if !rotated {
            return Ok((w, v));
        }
        let _ = sweep;
    }
    Err(LinalgError::SvdNotConverged { sweeps: SVD_MAX_SWEEPS })
}

/// Ordered full SVD pieces for an `s × D` matrix with `s ≥ D`:
/// columns of `w` are `σ_i u_i`, columns of `v` are `v_i`, `sigma` sorted
/// non-increasing.
fn svd_tall(x: &Matrix) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>), LinalgError> {
    let (mut w, mut v) = hestenes_jacobi(x)?;
    let mut order: Vec<usize> = (0..x.cols()).collect();
    let norms: Vec<f64> = w.iter().map(|col| col.iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
    let sigma: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    w = order.iter().map(|&i| std::mem::take(&mut w[i])).collect();
    v = order.iter().map(|&i| std::mem::take(&mut v[i])).collect();
    Ok((w, v, sigma))
}

/// Best rank-`r` factorization of `x` (Eckart–Young optimal).
pub fn truncated_svd(x: &Matrix, rank: usize) -> Result<TruncatedSvd, LinalgError> {
    let (s, d) = (x.rows(), x.cols());
    if rank == 0 || rank > s.min(d) {
        return Err(LinalgError::RankOutOfRange { rank, rows: s, cols: d });
    }
    x.check_finite()?;

    if s >= d {
        let (w, v, sigma) = svd_tall(x)?;
        let mut left = Matrix::zeros(s, rank);
        let mut right = Matrix::zeros(rank, d);
        for j in 0..rank {
            for i in 0..s {
                left.set(i, j, w[j][i] as f32);
            }
            for i in 0..d {
                right.set(j, i, v[j][i] as f32);
            }
        }
        let singular_values = sigma[..rank].iter().map(|&x| x as f32).collect();
        Ok(TruncatedSvd { left, right, rank, singular_values })
    } else {
        // Factor the transpose: Xᵀ = U'Σ'V'ᵀ gives X = V'Σ'U'ᵀ, so the left
        // factor is V'Σ' and the right factor rows are normalized columns of
        // the orthogonalized working copy.
        let xt = x.transpose();
        let (w, v, sigma) = svd_tall(&xt)?;
        let mut left = Matrix::zeros(s, rank);
        let mut right = Matrix::zeros(rank, d);
        for j in 0..rank {
            for i in 0..s {
                left.set(i, j, (v[j][i] * sigma[j]) as f32);
            }
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
        for j in 0..rank {
            if sigma[j] > 0.0 {
                basis.push(w[j].iter().map(|&a| a / sigma[j]).collect());
            } else {
                basis.push(orthonormal_completion(&basis, d));
            }
        }
        for (j, col) in basis.iter().enumerate() {
            for i in 0..d {
                right.set(j, i, col[i] as f32);
            }
        }
        let singular_values = sigma[..rank].iter().map(|&x| x as f32).collect();
        Ok(TruncatedSvd { left, right, rank, singular_values })
    }
}

/// One unit vector orthogonal to everything in `basis` (all length `dim`).
fn orthonormal_completion(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    for candidate_axis in 0..dim {
        let mut v = vec![0.0f64; dim];
        v[candidate_axis] = 1.0;
        for b in basis {
            let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for vi in &mut v {
                *vi /= norm;
            }
            return v;
        }
    }
    unreachable!("basis cannot span more than dim directions");
}

/// Relative singular value profile `σ_i / σ₁`, non-increasing, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum {
    pub values: Vec<f32>,
    /// Set when `σ₁ = 0` (zero matrix): values are reported as all-zero.
    pub zero_matrix: bool,
}

pub fn singular_spectrum(x: &Matrix) -> Result<SingularSpectrum, LinalgError> {
    x.check_finite()?;
    let tall = if x.rows() >= x.cols() { x.clone() } else { x.transpose() };
    let (_, _, sigma) = svd_tall(&tall)?;
    let top = sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(SingularSpectrum { values: vec![0.0; sigma.len()], zero_matrix: true });
    }
    let values = sigma.iter().map(|&s| ((s / top).clamp(0.0, 1.0)) as f32).collect();
    Ok(SingularSpectrum { values, zero_matrix: false })
}

// ── Rotary position embedding ───────────────────────────────────────────────

/// Rotary embedding schedule: pair layout and frequency base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    /// Frequency base θ; angle for pair `i` at position `p` is
    /// `p · θ^(−2i/d)`.
    pub base: f32,
    /// `true` pairs adjacent lanes `(2i, 2i+1)`; `false` pairs split halves
    /// `(i, i + d/2)`.
    pub interleaved: bool,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f32, interleaved: bool) -> Result<Self, LinalgError> {
        if head_dim % 2 != 0 {
            return Err(LinalgError::OddHeadDim { head_dim });
        }
        assert!(base > 0.0, "rope base must be positive");
        Ok(Self { head_dim, base, interleaved })
    }

    /// Conventional default base of 10000.
    pub fn standard(head_dim: usize) -> Result<Self, LinalgError> {
        Self::new(head_dim, 10000.0, false)
    }

    fn pair(&self, i: usize) -> (usize, usize) {
        if self.interleaved {
            (2 * i, 2 * i + 1)
        } else {
            (i, i + self.head_dim / 2)
        }
    }

    fn frequency(&self, i: usize) -> f64 {
        f64::from(self.base).powf(-2.0 * i as f64 / self.head_dim as f64)
    }
}

fn rope_rotate(k: &Matrix, positions: &[usize], params: &RopeParams, sign: f64) -> Result<Matrix, LinalgError> {
    if k.cols() != params.head_dim {
        return Err(LinalgError::DimensionMismatch { expected: params.head_dim, got: k.cols() });
    }
    if positions.len() != k.rows() {
        return Err(LinalgError::DimensionMismatch { expected: k.rows(), got: positions.len() });
    }
    if params.head_dim % 2 != 0 {
        return Err(LinalgError::OddHeadDim { head_dim: params.head_dim });
    }
    let half = params.head_dim / 2;
    let mut out = k.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let (a, b) = params.pair(i);
            let angle = sign * pos as f64 * params.frequency(i);
            let (sin, cos) = angle.sin_cos();
            let x = f64::from(row[a]);
            let y = f64::from(row[b]);
            row[a] = (x * cos - y * sin) as f32;
            row[b] = (x * sin + y * cos) as f32;
        }
    }
    Ok(out)
}

/// Rotate each row of `k` by its position's rotary angles. Row norms are
/// preserved (pure rotation).
pub fn rope_apply(k: &Matrix, positions: &[usize], params: &RopeParams) -> Result<Matrix, LinalgError> {
    rope_rotate(k, positions, params, 1.0)
}

/// Exact inverse of [`rope_apply`] at the same positions.
pub fn rope_unapply(k: &Matrix, positions: &[usize], params: &RopeParams) -> Result<Matrix, LinalgError> {
    rope_rotate(k, positions, params, -1.0)
}

// ── Softmax ─────────────────────────────────────────────────────────────────

/// Row-wise softmax with max subtraction and f64 accumulation.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_slice(out.row_mut(r));
    }
    out
}

pub fn softmax_slice(row: &mut [f32]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; row.len()];
    for (e, &v) in exps.iter_mut().zip(row.iter()) {
        *e = f64::from(v - max).exp();
        sum += *e;
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

// ── Chunk cosine similarity ─────────────────────────────────────────────────

/// Per-chunk minimum cosine similarity between a chunk's mean and each of
/// its rows. `chunk_size` must divide the row count. A zero-norm row or a
/// zero-norm chunk mean yields −1 for the affected tokens, forcing the chunk
/// toward outlier status.
pub fn chunk_min_cosine(k_rope: &Matrix, chunk_size: usize) -> Result<Vec<f32>, LinalgError> {
    if chunk_size == 0 || k_rope.rows() % chunk_size != 0 {
        return Err(LinalgError::ChunkMisaligned { chunk_size, seq_len: k_rope.rows() });
    }
    let n_chunks = k_rope.rows() / chunk_size;
    let d = k_rope.cols();
    let mut out = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let start = c * chunk_size;
        let mut mean = vec![0.0f64; d];
        for t in 0..chunk_size {
            for (m, &v) in mean.iter_mut().zip(k_rope.row(start + t)) {
                *m += f64::from(v);
            }
        }
        let mean_f32: Vec<f32> = mean.iter().map(|&m| (m / chunk_size as f64) as f32).collect();
        let mut min_sim = f64::INFINITY;
        for t in 0..chunk_size {
            let sim = match cosine(&mean_f32, k_rope.row(start + t)) {
                Some(s) => s,
                None => {
                    log::debug!("zero-norm vector in chunk {c}, token {}; similarity forced to -1", start + t);
                    -1.0
                }
            };
            min_sim = min_sim.min(sim.clamp(-1.0, 1.0));
        }
        out.push(min_sim as f32);
    }
    Ok(out)
}

/// Mean of each chunk's rows; `chunk_size` must divide the row count.
pub fn chunk_means(k: &Matrix, chunk_size: usize) -> Result<Matrix, LinalgError> {
    if chunk_size == 0 || k.rows() % chunk_size != 0 {
        return Err(LinalgError::ChunkMisaligned { chunk_size, seq_len: k.rows() });
    }
    let n_chunks = k.rows() / chunk_size;
    let mut out = Matrix::zeros(n_chunks, k.cols());
    for c in 0..n_chunks {
        let mut acc = vec![0.0f64; k.cols()];
        for t in 0..chunk_size {
            for (a, &v) in acc.iter_mut().zip(k.row(c * chunk_size + t)) {
                *a += f64::from(v);
            }
        }
        for (j, a) in acc.iter().enumerate() {
            out.set(c, j, (a / chunk_size as f64) as f32);
        }
    }
    Ok(out)
}

// ── Subspace similarity ─────────────────────────────────────────────────────

/// Similarity in `[0, 1]` between the row spans of two `r × d` factors:
/// `‖Ψ₁ᵀΨ₂‖_F² / r` over orthonormalized rows, which equals the Frobenius
/// inner product of the two rank-`r` projection matrices divided by `r`.
/// 1 when the spans coincide, 0 when they are orthogonal.
pub fn subspace_similarity(b1: &Matrix, b2: &Matrix) -> Result<f32, LinalgError> {
    if b1.rows() != b2.rows() || b1.cols() != b2.cols() {
        return Err(LinalgError::DimensionMismatch { expected: b1.rows(), got: b2.rows() });
    }
    let r = b1.rows();
    if r == 0 {
        return Err(LinalgError::RankOutOfRange { rank: 0, rows: 0, cols: b1.cols() });
    }
    let q1 = orthonormalize_rows(b1)?;
    let q2 = orthonormalize_rows(b2)?;
    let mut acc = 0.0f64;
    for i in 0..r {
        for j in 0..r {
            let d = dot_f64(q1.row(i), q2.row(j));
            acc += d * d;
        }
    }
    Ok(((acc / r as f64).clamp(0.0, 1.0)) as f32)
}

const MGS_DROP_TOL: f64 = 1e-6;

/// Modified Gram–Schmidt over rows. Rows already orthonormal pass through
/// unchanged up to rounding; a row whose residual norm falls below the drop
/// tolerance is a rank-deficiency error.
fn orthonormalize_rows(b: &Matrix) -> Result<Matrix, LinalgError> {
    let mut rows: Vec<Vec<f64>> = (0..b.rows())
        .map(|i| b.row(i).iter().map(|&x| f64::from(x)).collect())
        .collect();
    for i in 0..rows.len() {
        for j in 0..i {
            let proj: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let prev = rows[j].clone();
            for (a, p) in rows[i].iter_mut().zip(&prev) {
                *a -= proj * p;
            }
        }
        let norm: f64 = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < MGS_DROP_TOL {
            return Err(LinalgError::RankDeficientFactor { row: i });
        }
        for a in &mut rows[i] {
            *a /= norm;
        }
    }
    let data: Vec<f32> = rows.into_iter().flatten().map(|x| x as f32).collect();
    Matrix::new(b.rows(), b.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::rng::CounterRng;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut CounterRng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.next_gaussian_f32()).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Test-side reference SVD, independent of the Hestenes path: singular
    /// values and right vectors via cyclic Jacobi eigendecomposition of the
    /// Gram matrix XᵀX in f64.
    fn reference_svd(x: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = x.cols();
        let mut g = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..x.rows() {
                    acc += f64::from(x.get(t, i)) * f64::from(x.get(t, j));
                }
                g[i][j] = acc;
            }
        }
        let mut v = vec![vec![0.0f64; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += g[p][q] * g[p][q];
                }
            }
            if off.sqrt() < 1e-14 * (1.0 + g.iter().enumerate().map(|(i, r)| r[i].abs()).sum::<f64>()) {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if g[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for k in 0..n {
                        let gkp = g[k][p];
                        let gkq = g[k][q];
                        g[k][p] = c * gkp - s * gkq;
                        g[k][q] = s * gkp + c * gkq;
                    }
                    for k in 0..n {
                        let gpk = g[p][k];
                        let gqk = g[q][k];
                        g[p][k] = c * gpk - s * gqk;
                        g[q][k] = s * gpk + c * gqk;
                    }
                    for row in v.iter_mut() {
                        let vp = row[p];
                        let vq = row[q];
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let mut eig: Vec<(f64, usize)> =
            (0..n).map(|i| (g[i][i].max(0.0), i)).collect();
        eig.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let sigma: Vec<f64> = eig.iter().map(|&(e, _)| e.sqrt()).collect();
        let vectors: Vec<Vec<f64>> = eig
            .iter()
            .map(|&(_, idx)| (0..n).map(|row| v[row][idx]).collect())
            .collect();
        (sigma, vectors)
    }

    // ── truncated_svd ──────────────────────────────────────────────────

    #[test]
    fn exact_rank_one_input_reconstructs_exactly() {
        let x = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let svd = truncated_svd(&x, 1).unwrap();
        let err = x.max_abs_diff(&svd.reconstruct());
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn full_rank_reconstruction_is_lossless() {
        let mut rng = CounterRng::new(1);
        for &(s, d) in &[(6, 4), (4, 6), (12, 12)] {
            let x = random_matrix(&mut rng, s, d);
            let svd = truncated_svd(&x, s.min(d)).unwrap();
            let err = {
                let rec = svd.reconstruct();
                let diff: f64 = x
                    .data()
                    .iter()
                    .zip(rec.data())
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum();
                diff.sqrt()
            };
            assert!(err <= 1e-5 * x.frobenius_norm(), "err {err} for {s}x{d}");
        }
    }

    #[test]
    fn truncation_error_matches_reference_tail() {
        let mut rng = CounterRng::new(2);
        let x = random_matrix(&mut rng, 64, 32);
        let svd = truncated_svd(&x, 8).unwrap();
        let rec = svd.reconstruct();
        let err: f64 = x
            .data()
            .iter()
            .zip(rec.data())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            .sqrt();
        let (sigma, _) = reference_svd(&x);
        let tail: f64 = sigma[8..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-4 * tail, "err {err} vs tail {tail}");
    }

    #[test]
    fn singular_values_match_reference_and_are_sorted() {
        let mut rng = CounterRng::new(3);
        for &(s, d) in &[(20, 9), (9, 20)] {
            let x = random_matrix(&mut rng, s, d);
            let svd = truncated_svd(&x, s.min(d)).unwrap();
            // Singular values of X and Xᵀ coincide; run the reference on the
            // orientation with the smaller Gram matrix.
            let (sigma_ref, _) = if s >= d { reference_svd(&x) } else { reference_svd(&x.transpose()) };
            for w in svd.singular_values.windows(2) {
                assert!(w[0] >= w[1]);
            }
            for (got, want) in svd.singular_values.iter().zip(&sigma_ref) {
                assert!((f64::from(*got) - want).abs() <= 1e-4 * want.max(1.0));
            }
        }
    }

    #[test]
    fn right_factor_rows_are_orthonormal() {
        let mut rng = CounterRng::new(4);
        for &(s, d) in &[(30, 8), (8, 30)] {
            let x = random_matrix(&mut rng, s, d);
            let svd = truncated_svd(&x, 5).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    let got = dot_f64(svd.right.row(i), svd.right.row(j));
                    assert!((got - want).abs() < 1e-5, "({i},{j}) -> {got}");
                }
            }
        }
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        let x = Matrix::zeros(4, 3);
        assert!(matches!(truncated_svd(&x, 0), Err(LinalgError::RankOutOfRange { .. })));
        assert!(matches!(truncated_svd(&x, 4), Err(LinalgError::RankOutOfRange { .. })));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = Matrix::new(2, 2, vec![1.0, f32::NAN, 0.0, 1.0]).unwrap();
        assert!(matches!(truncated_svd(&x, 1), Err(LinalgError::NonFinite { index: 1 })));
    }

    #[test]
    fn eckart_young_error_monotone_in_rank() {
        let mut rng = CounterRng::new(5);
        let x = random_matrix(&mut rng, 24, 16);
        let mut prev = f64::INFINITY;
        for r in 1..=16 {
            let svd = truncated_svd(&x, r).unwrap();
            let rec = svd.reconstruct();
            let err: f64 = x
                .data()
                .iter()
                .zip(rec.data())
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err <= prev + 1e-6, "rank {r}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn beats_random_projection_baseline() {
        let mut rng = CounterRng::new(6);
        let x = random_matrix(&mut rng, 32, 16);
        let r = 4;
        let svd = truncated_svd(&x, r).unwrap();
        let rec = svd.reconstruct();
        let svd_err: f64 = x
            .data()
            .iter()
            .zip(rec.data())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            .sqrt();
        for trial in 0..5 {
            let mut proj_rng = CounterRng::derive(100 + trial, 0);
            let g = random_matrix(&mut proj_rng, 16, r);
            let q = orthonormalize_rows(&g.transpose()).unwrap(); // r x 16 orthonormal rows
            let baseline = x.matmul(&q.transpose()).unwrap().matmul(&q).unwrap();
            let base_err: f64 = x
                .data()
                .iter()
                .zip(baseline.data())
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(svd_err <= base_err + 1e-9, "svd {svd_err} vs baseline {base_err}");
        }
    }

    // ── singular_spectrum ──────────────────────────────────────────────

    #[test]
    fn identity_spectrum_is_flat() {
        let spectrum = singular_spectrum(&Matrix::eye(4, 4)).unwrap();
        assert!(!spectrum.zero_matrix);
        assert_eq!(spectrum.values, vec![1.0; 4]);
    }

    #[test]
    fn rank_one_outer_product_spectrum() {
        let u = [1.0f32, 2.0, -1.0];
        let v = [0.5f32, 1.5];
        let mut x = Matrix::zeros(3, 2);
        for i in 0..3 {
            for j in 0..2 {
                x.set(i, j, u[i] * v[j]);
            }
        }
        let spectrum = singular_spectrum(&x).unwrap();
        assert!((spectrum.values[0] - 1.0).abs() < 1e-6);
        assert!(spectrum.values[1].abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_spectrum_flagged() {
        let spectrum = singular_spectrum(&Matrix::zeros(3, 3)).unwrap();
        assert!(spectrum.zero_matrix);
        assert_eq!(spectrum.values, vec![0.0; 3]);
    }

    // ── rope ───────────────────────────────────────────────────────────

    #[test]
    fn position_zero_is_identity() {
        let mut rng = CounterRng::new(7);
        let k = random_matrix(&mut rng, 3, 8);
        let params = RopeParams::standard(8).unwrap();
        let out = rope_apply(&k, &[0, 0, 0], &params).unwrap();
        assert_eq!(out, k);
    }

    #[test]
    fn d2_position_one_rotates_by_one_radian() {
        // For d=2 the single pair has frequency θ⁰ = 1 regardless of base.
        let k = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let params = RopeParams::new(2, 10000.0, false).unwrap();
        let out = rope_apply(&k, &[1], &params).unwrap();
        assert!((f64::from(out.get(0, 0)) - 1.0f64.cos()).abs() < 1e-6);
        assert!((f64::from(out.get(0, 1)) - 1.0f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn rope_preserves_row_norms() {
        let mut rng = CounterRng::new(8);
        let k = random_matrix(&mut rng, 16, 32);
        let positions: Vec<usize> = (100..116).collect();
        for interleaved in [false, true] {
            let params = RopeParams::new(32, 10000.0, interleaved).unwrap();
            let out = rope_apply(&k, &positions, &params).unwrap();
            for r in 0..16 {
                let before = norm_f64(k.row(r));
                let after = norm_f64(out.row(r));
                assert!((before - after).abs() < 1e-5 * before.max(1.0));
            }
        }
    }

    #[test]
    fn rope_dot_depends_only_on_position_difference() {
        let x = Matrix::new(1, 2, vec![0.3, -1.2]).unwrap();
        let y = Matrix::new(1, 2, vec![0.9, 0.4]).unwrap();
        let params = RopeParams::new(2, 10000.0, false).unwrap();
        let dot_at = |px: usize, py: usize| {
            let rx = rope_apply(&x, &[px], &params).unwrap();
            let ry = rope_apply(&y, &[py], &params).unwrap();
            dot_f64(rx.row(0), ry.row(0))
        };
        let base = dot_at(3, 7);
        for shift in [1usize, 10, 50] {
            assert!((dot_at(3 + shift, 7 + shift) - base).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_unapply_inverts() {
        let mut rng = CounterRng::new(9);
        let k = random_matrix(&mut rng, 4, 16);
        let positions = [5usize, 99, 1000, 12345];
        let params = RopeParams::standard(16).unwrap();
        let round = rope_unapply(&rope_apply(&k, &positions, &params).unwrap(), &positions, &params).unwrap();
        assert!(k.max_abs_diff(&round) < 1e-4);
    }

    #[test]
    fn odd_head_dim_rejected() {
        assert!(matches!(RopeParams::new(3, 10000.0, false), Err(LinalgError::OddHeadDim { .. })));
        let k = Matrix::zeros(1, 3);
        let params = RopeParams { head_dim: 3, base: 10000.0, interleaved: false };
        assert!(rope_apply(&k, &[0], &params).is_err());
    }

    // ── chunk cosine ───────────────────────────────────────────────────

    #[test]
    fn identical_rows_have_unit_min_similarity() {
        let row = vec![1.0f32, -2.0, 0.5, 3.0];
        let k = Matrix::from_rows(&vec![row; 8]).unwrap();
        let sims = chunk_min_cosine(&k, 8).unwrap();
        assert_eq!(sims.len(), 1);
        assert!((sims[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn anti_aligned_row_drives_similarity_negative() {
        // Seven rows along +e1, one row opposing the chunk mean.
        let mut rows = vec![vec![1.0f32, 0.0]; 7];
        rows.push(vec![-20.0, 0.0]);
        let k = Matrix::from_rows(&rows).unwrap();
        let sims = chunk_min_cosine(&k, 8).unwrap();
        // Direct computation: mean = (7*1 - 20)/8 < 0, so row 0 has cos -1.
        assert!(sims[0] < 0.0);
    }

    #[test]
    fn chunk_count_matches_shape() {
        let k = Matrix::zeros(16, 4);
        let sims = chunk_min_cosine(&k, 8).unwrap();
        assert_eq!(sims.len(), 2);
        // All-zero chunks degenerate to -1.
        assert_eq!(sims, vec![-1.0, -1.0]);
    }

    #[test]
    fn misaligned_chunk_size_rejected() {
        let k = Matrix::zeros(10, 4);
        assert!(matches!(chunk_min_cosine(&k, 8), Err(LinalgError::ChunkMisaligned { .. })));
    }

    #[test]
    fn chunk_means_of_constant_chunk_equal_constant() {
        let row = vec![2.5f32, -1.0, 0.0];
        let k = Matrix::from_rows(&vec![row.clone(); 4]).unwrap();
        let means = chunk_means(&k, 4).unwrap();
        assert_eq!(means.row(0), row.as_slice());
    }

    // ── subspace similarity ────────────────────────────────────────────

    #[test]
    fn identical_factors_give_one() {
        let mut rng = CounterRng::new(10);
        let b = truncated_svd(&random_matrix(&mut rng, 12, 6), 3).unwrap().right;
        let sim = subspace_similarity(&b, &b).unwrap();
        assert!((sim - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_spans_give_zero() {
        let b1 = Matrix::new(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let b2 = Matrix::new(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(subspace_similarity(&b1, &b2).unwrap(), 0.0);
    }

    #[test]
    fn matches_projection_matrix_oracle() {
        // Brute-force oracle: build the d×d projections H = BᵀB explicitly
        // and take tr(H₁H₂)/r.
        let mut rng = CounterRng::new(11);
        for trial in 0..5 {
            let b1 = truncated_svd(&random_matrix(&mut rng, 10, 4), 2).unwrap().right;
            let b2 = truncated_svd(&random_matrix(&mut rng, 10 + trial, 4), 2).unwrap().right;
            let h1 = b1.transpose().matmul(&b1).unwrap();
            let h2 = b2.transpose().matmul(&b2).unwrap();
            let mut trace = 0.0f64;
            for i in 0..4 {
                for k in 0..4 {
                    trace += f64::from(h1.get(i, k)) * f64::from(h2.get(k, i));
                }
            }
            let oracle = trace / 2.0;
            let got = f64::from(subspace_similarity(&b1, &b2).unwrap());
            assert!((got - oracle).abs() < 1e-5, "{got} vs {oracle}");
        }
    }

    #[test]
    fn rotated_basis_of_same_subspace_still_one() {
        let mut rng = CounterRng::new(12);
        let b = truncated_svd(&random_matrix(&mut rng, 12, 6), 3).unwrap().right;
        // Random orthogonal 3x3 mixing of the rows spans the same subspace.
        let mix = orthonormalize_rows(&random_matrix(&mut rng, 3, 3)).unwrap();
        let rotated = mix.matmul(&b).unwrap();
        let sim = subspace_similarity(&b, &rotated).unwrap();
        assert!((sim - 1.0).abs() < 1e-6, "sim {sim}");
    }

    #[test]
    fn rank_mismatch_rejected() {
        let b1 = Matrix::eye(2, 4);
        let b2 = Matrix::eye(3, 4);
        assert!(subspace_similarity(&b1, &b2).is_err());
    }

    #[test]
    fn rank_deficient_factor_rejected() {
        let b = Matrix::new(2, 3, vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            subspace_similarity(&b, &b),
            Err(LinalgError::RankDeficientFactor { row: 1 })
        ));
    }

    // ── property suites ────────────────────────────────────────────────

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..500, rows in 1usize..5, cols in 1usize..20) {
            let mut rng = CounterRng::new(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| (rng.next_gaussian() * 5.0) as f32).collect();
            let x = Matrix::new(rows, cols, data).unwrap();
            let sm = softmax_rows(&x);
            for r in 0..rows {
                let sum: f64 = sm.row(r).iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_shift_invariant(seed in 0u64..500, shift in -50.0f32..50.0, cols in 1usize..16) {
            let mut rng = CounterRng::new(seed);
            let data: Vec<f32> = (0..cols).map(|_| (rng.next_gaussian() * 3.0) as f32).collect();
            let x = Matrix::new(1, cols, data.clone()).unwrap();
            let shifted = Matrix::new(1, cols, data.iter().map(|&v| v + shift).collect()).unwrap();
            let a = softmax_rows(&x);
            let b = softmax_rows(&shifted);
            prop_assert!(a.max_abs_diff(&b) < 1e-5);
        }

        #[test]
        fn subspace_similarity_symmetric_and_bounded(seed in 0u64..200) {
            let mut rng = CounterRng::new(seed);
            let b1 = truncated_svd(&random_matrix(&mut rng, 9, 5), 2).unwrap().right;
            let b2 = truncated_svd(&random_matrix(&mut rng, 9, 5), 2).unwrap().right;
            let ab = subspace_similarity(&b1, &b2).unwrap();
            let ba = subspace_similarity(&b2, &b1).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((f64::from(ab) - f64::from(ba)).abs() < 1e-6);
        }

        #[test]
        fn rope_rows_stay_isometric(seed in 0u64..200, pos in 0usize..4096) {
            let mut rng = CounterRng::new(seed);
            let k = random_matrix(&mut rng, 2, 8);
            let params = RopeParams::standard(8).unwrap();
            let out = rope_apply(&k, &[pos, pos + 1], &params).unwrap();
            for r in 0..2 {
                let before = norm_f64(k.row(r));
                let after = norm_f64(out.row(r));
                prop_assert!((before - after).abs() < 1e-5 * before.max(1.0));
            }
        }
    }
}

//! Dense symmetric positive-definite kernels.
//!
//! Every covariance-like object in the crate (component covariances,
//! variational covariances, the unrestricted scatter matrices) is a
//! [`SymMatrix`]: full row-major storage with symmetry maintained by the
//! mutators. Block structure is exploited by callers, not by the storage.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} is {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("zero or negative variance at index {index}")]
    ZeroVariance { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Square symmetric matrix with dense row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut out = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            out.data[i * diag.len() + i] = v;
        }
        out
    }

    /// Builds a matrix from `f(i, j)` evaluated on the lower triangle and
    /// mirrored, so the result is exactly symmetric.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                let v = f(i, j);
                out.data[i * dim + j] = v;
                out.data[j * dim + i] = v;
            }
        }
        out
    }

    /// Builds from rows, rejecting ragged input and asymmetry beyond 1e-10
    /// relative. The stored matrix is the symmetrized average.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        for r in rows {
            if r.len() != dim {
                return Err(LinalgError::DimensionMismatch { expected: dim, got: r.len() });
            }
        }
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (rows[i][j], rows[j][i]);
                let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                if (a - b).abs() > 1e-10 * scale {
                    return Err(LinalgError::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self::from_fn(dim, |i, j| 0.5 * (rows[i][j] + rows[j][i])))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    /// `tr(self · other)` for symmetric operands.
    pub fn trace_product(&self, other: &SymMatrix) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        dot(&self.data, &other.data)
    }

    pub fn add_diag(&mut self, v: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += v;
        }
    }

    pub fn add_diag_vec(&mut self, v: &[f64]) {
        for (i, &x) in v.iter().enumerate() {
            self.data[i * self.dim + i] += x;
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &SymMatrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self += alpha * x xᵀ`.
    pub fn rank_one_update(&mut self, alpha: f64, x: &[f64]) {
        let d = self.dim;
        for i in 0..d {
            let ax = alpha * x[i];
            for j in 0..d {
                self.data[i * d + j] += ax * x[j];
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        cholesky(self)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor, row-major with zeros above the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn l(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.dim + j]
    }

    pub fn lower(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| self.l[i * self.dim..(i + 1) * self.dim].to_vec()).collect()
    }

    /// `log |A| = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.l(i, i).ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let row = &self.l[i * d..i * d + i];
            let s = b[i] - dot(row, &b[..i]);
            b[i] = s / self.l[i * d + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in (0..d).rev() {
            let mut s = b[i];
            for k in i + 1..d {
                s -= self.l[k * d + i] * b[k];
            }
            b[i] = s / self.l[i * d + i];
        }
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.forward_in_place(b);
        self.backward_in_place(b);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> SymMatrix {
        let d = self.dim;
        // lower-triangular L⁻¹, row-major
        let mut li = vec![0.0; d * d];
        for j in 0..d {
            li[j * d + j] = 1.0 / self.l[j * d + j];
            for i in j + 1..d {
                let mut s = 0.0;
                for k in j..i {
                    s += self.l[i * d + k] * li[k * d + j];
                }
                li[i * d + j] = -s / self.l[i * d + i];
            }
        }
        let mut inv = SymMatrix::zeros(d);
        for i in 0..d {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i..d {
                    s += li[k * d + i] * li[k * d + j];
                }
                inv.data[i * d + j] = s;
                inv.data[j * d + i] = s;
            }
        }
        inv
    }

    /// `xᵀ A⁻¹ x`.
    pub fn quad_inv(&self, x: &[f64]) -> f64 {
        let mut y = x.to_vec();
        self.forward_in_place(&mut y);
        dot(&y, &y)
    }
}

pub fn cholesky(a: &SymMatrix) -> Result<Cholesky> {
    let d = a.dim;
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a.data[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a.data[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    Ok(Cholesky { dim: d, l })
}

pub fn logdet_pd(a: &SymMatrix) -> Result<f64> {
    Ok(cholesky(a)?.logdet())
}

pub fn solve_pd(a: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.dim {
        return Err(LinalgError::DimensionMismatch { expected: a.dim, got: b.len() });
    }
    Ok(cholesky(a)?.solve(b))
}

/// Solves `A X = B` for several right-hand sides given as columns.
pub fn solve_pd_columns(a: &SymMatrix, cols: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let chol = cholesky(a)?;
    cols.iter()
        .map(|b| {
            if b.len() != a.dim {
                Err(LinalgError::DimensionMismatch { expected: a.dim, got: b.len() })
            } else {
                Ok(chol.solve(b))
            }
        })
        .collect()
}

/// Factorizes `a`; on failure retries once with `1e-8 · mean(diag)` added to
/// the diagonal. Returns the factor together with the jitter actually used.
pub fn cholesky_jittered(a: &SymMatrix) -> Result<(Cholesky, f64)> {
    match cholesky(a) {
        Ok(c) => Ok((c, 0.0)),
        Err(first) => {
            let mean_diag = a.trace() / a.dim.max(1) as f64;
            let jitter = 1e-8 * mean_diag.abs();
            if !(jitter > 0.0) {
                return Err(first);
            }
            let mut b = a.clone();
            b.add_diag(jitter);
            cholesky(&b).map(|c| (c, jitter))
        }
    }
}

/// Index sets of the connected components of the nonzero pattern, each
/// sorted, ordered by smallest index.
pub fn sparsity_blocks(a: &SymMatrix) -> Vec<Vec<usize>> {
    let d = a.dim;
    let mut seen = vec![false; d];
    let mut blocks = Vec::new();
    for start in 0..d {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut block = vec![start];
        let mut next = 0;
        while next < block.len() {
            let i = block[next];
            next += 1;
            for j in 0..d {
                if !seen[j] && a.data[i * d + j] != 0.0 {
                    seen[j] = true;
                    block.push(j);
                }
            }
        }
        block.sort_unstable();
        blocks.push(block);
    }
    blocks
}

/// Inverse and log-determinant of a positive definite matrix that is zero
/// between the given blocks, factorizing each block separately (with the
/// same single jitter retry as [`cholesky_jittered`]).
pub fn block_inverse_pd(a: &SymMatrix, blocks: &[Vec<usize>]) -> Result<(SymMatrix, f64)> {
    let d = a.dim;
    let mut inv = SymMatrix::zeros(d);
    let mut logdet = 0.0;
    for idx in blocks {
        let sub = SymMatrix::from_fn(idx.len(), |i, j| a.data[idx[i] * d + idx[j]]);
        let (chol, _) = cholesky_jittered(&sub)?;
        logdet += chol.logdet();
        let sub_inv = chol.inverse();
        for (a_i, &i) in idx.iter().enumerate() {
            for (b_j, &j) in idx.iter().enumerate() {
                inv.data[i * d + j] = sub_inv.data[a_i * sub_inv.dim + b_j];
            }
        }
    }
    Ok((inv, logdet))
}

pub fn corr_from_cov(w: &SymMatrix) -> Result<SymMatrix> {
    let d = w.dim;
    let mut sd = Vec::with_capacity(d);
    for i in 0..d {
        let v = w.get(i, i);
        if !(v > 0.0) {
            return Err(LinalgError::ZeroVariance { index: i });
        }
        sd.push(v.sqrt());
    }
    Ok(SymMatrix::from_fn(d, |i, j| if i == j { 1.0 } else { w.get(i, j) / (sd[i] * sd[j]) }))
}

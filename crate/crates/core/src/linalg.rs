//! Small dense/sparse helpers shared by the model, solvers and smoother.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Compressed sparse row matrix, used for the (very sparse) dynamics matrix
/// in long simulation and smoothing loops.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut row_ptr = Vec::with_capacity(m.nrows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { nrows: m.nrows(), ncols: m.ncols(), row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `out = self * x`
    pub fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for (i, o) in out.iter_mut().enumerate() {
            let range = self.row_ptr[i]..self.row_ptr[i + 1];
            *o = self.col_idx[range.clone()]
                .iter()
                .zip(&self.values[range])
                .map(|(&j, &v)| v * x[j])
                .sum();
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows);
        self.mul_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// `self * m`
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(m.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, m.ncols());
        for c in 0..m.ncols() {
            let x = m.column(c);
            for i in 0..self.nrows {
                let range = self.row_ptr[i]..self.row_ptr[i + 1];
                out[(i, c)] = self.col_idx[range.clone()]
                    .iter()
                    .zip(&self.values[range])
                    .map(|(&j, &v)| v * x[j])
                    .sum();
            }
        }
        out
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Positive semidefinite up to `-tol * max(1, max|diag|)`: Cholesky of the
/// shifted matrix succeeds.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += tol * scale.max(1.0);
    }
    shifted.cholesky().is_some()
}

/// Inverse of a symmetric positive definite matrix, falling back to LU.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(symmetrized(ch.inverse()));
    }
    m.clone()
        .try_inverse()
        .map(symmetrized)
        .ok_or_else(|| Error::Numerical("matrix is singular".to_string()))
}

/// `x` with `m x = b`, Cholesky first, LU as fallback.
pub fn solve_spd(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("matrix is singular".to_string()))
}

/// Factor `F` with `F F' = cov` for sampling. Semidefinite input is handled
/// through the eigen-decomposition with negative eigenvalues clipped.
pub fn covariance_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if cov.iter().all(|&v| v == 0.0) {
        return DMatrix::zeros(cov.nrows(), cov.ncols());
    }
    if let Some(ch) = cov.clone().cholesky() {
        return ch.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let mut f = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Frobenius norm of `a - b`.
pub fn frob_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|j| (0..n).all(|i| i == j || m[(i, j)] == 0.0))
}

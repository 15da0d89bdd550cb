//! Small dense linear-algebra helpers on top of `nalgebra`.

use alloc::format;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Tolerance used when deciding semi-definiteness: an eigenvalue `>= -PSD_TOL`
/// counts as non-negative.
pub const PSD_TOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    (m - m.transpose()).amax()
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 1 {
        return DVector::from_element(1, m[(0, 0)]);
    }
    let mut ev = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    ev.as_mut_slice().sort_by(f64::total_cmp);
    ev
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    ev[ev.len() - 1]
}

/// Operator 2-norm.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return libm::fabs(m[(0, 0)]);
    }
    if m.is_empty() {
        return 0.0;
    }
    let gram = m.transpose() * m;
    libm::sqrt(max_sym_eigenvalue(&gram).max(0.0))
}

pub fn vector_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Inverse by LU with partial pivoting.
pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 1 && m.ncols() == 1 {
        let v = m[(0, 0)];
        if v == 0.0 || !v.is_finite() {
            return Err(Error::Singular(format!("1x1 matrix with entry {v}")));
        }
        return Ok(DMatrix::from_element(1, 1, 1.0 / v));
    }
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{}x{} matrix", m.nrows(), m.ncols())))
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| libm::fabs(*x)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number of `m` given its inverse.
pub fn condition_number(m: &DMatrix<f64>, inv: &DMatrix<f64>) -> f64 {
    one_norm(m) * one_norm(inv)
}

/// Symmetric square root of a positive semi-definite matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        if v < -PSD_TOL {
            return Err(Error::InvalidModel(format!("negative variance {v}")));
        }
        return Ok(DMatrix::from_element(1, 1, libm::sqrt(v.max(0.0))));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&l| l < -PSD_TOL) {
        return Err(Error::InvalidModel("covariance is not positive semi-definite".into()));
    }
    let root = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Writes `out = alpha * kernel * x` where `x` and `out` are row-major blocks
/// with `kernel.ncols()` and `kernel.nrows()` rows of `cols` entries.
pub fn kernel_apply(alpha: f64, kernel: &DMatrix<f64>, x: &[f64], cols: usize, out: &mut [f64]) {
    let (rows, inner) = kernel.shape();
    assert_eq!(x.len(), inner * cols);
    assert_eq!(out.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return;
    }
    // SAFETY: the slice lengths are checked above and the strides describe the
    // column-major kernel and the row-major blocks exactly.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inner,
            cols,
            alpha,
            kernel.as_ptr(),
            1,
            rows as isize,
            x.as_ptr(),
            cols as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

/// `out = m * x` for a small dense matrix and slice vectors.
#[inline]
pub fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate() {
            acc += m[(r, c)] * xc;
        }
        *o = acc;
    }
}

/// `out += m * x`.
#[inline]
pub fn mat_vec_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate() {
            acc += m[(r, c)] * xc;
        }
        *o += acc;
    }
}

/// `xᵀ m x` for a square `m`.
#[inline]
pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for r in 0..n {
        let mut row = 0.0;
        for c in 0..n {
            row += m[(r, c)] * x[c];
        }
        acc += x[r] * row;
    }
    acc
}

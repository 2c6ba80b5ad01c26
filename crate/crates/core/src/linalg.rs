//! Small shared helpers for symmetric-matrix handling.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Replaces `m` with its symmetric part (m + mᵀ)/2.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub(crate) fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Clips eigenvalues in [floor, 0) to zero in place.
///
/// `floor` is negative. An eigenvalue below it means the matrix is not a
/// covariance up to round-off and the caller must treat it as divergence.
pub(crate) fn clip_negative_eigs(m: &mut DMatrix<f64>, floor: f64) -> Result<()> {
    // Strictly positive-definite matrices take the cheap path.
    if m.clone().cholesky().is_some() {
        return Ok(());
    }
    let mut eig = m.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < floor {
        return Err(Error::NotPsd {
            min_eig,
            floor,
        });
    }
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    *m = eig.recompose();
    symmetrize(m);
    Ok(())
}

/// Symmetric square root with eigenvalue clipping as in [`clip_negative_eigs`].
pub(crate) fn psd_sqrt(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let mut eig = m.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < floor {
        return Err(Error::NotPsd {
            min_eig,
            floor,
        });
    }
    for v in eig.eigenvalues.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    Ok(eig.recompose())
}

pub(crate) fn check_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, scale: f64, what: &str) -> Result<()> {
    check_square(m, what)?;
    let mut max_asym: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if max_asym > 1e-9 * scale.max(1.0) {
        return Err(Error::NotSymmetric { max_asym });
    }
    Ok(())
}

//! Impulse-estimation geometry: which kick is sought, and how well the
//! smoothed state pins it down.
//!
//! A kick at time t_p displaces the phase-space mean along a unit direction n.
//! The forward filter knows nothing past t_p is needed; the backward filter
//! knows nothing before it. The difference of their means estimates the kick,
//! and its error variance is the n-projection of the summed conditional
//! covariances Σ(t_p) + Π(t_p).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::check_symmetric;
use crate::riccati::CovarianceTrajectory;

const UNIT_TOL: f64 = 1e-12;

fn check_unit(direction: &DVector<f64>) -> Result<()> {
    let norm = direction.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidParameter(format!(
            "kick direction must be a unit vector, got norm {norm:.17}"
        )));
    }
    Ok(())
}

/// One impulse-estimation task: kick time, observation horizon, direction,
/// and the true magnitude used when generating synthetic records.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseProblem {
    t_p: f64,
    t_end: f64,
    direction: DVector<f64>,
    alpha: f64,
}

impl ImpulseProblem {
    /// Requires 0 < t_p < t_end and a unit direction.
    pub fn new(t_p: f64, t_end: f64, direction: DVector<f64>, alpha: f64) -> Result<Self> {
        if !(t_p.is_finite() && t_end.is_finite() && 0.0 < t_p && t_p < t_end) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < t_p < t_end, got t_p = {t_p}, t_end = {t_end}"
            )));
        }
        if !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "kick magnitude must be finite, got {alpha}"
            )));
        }
        check_unit(&direction)?;
        Ok(Self {
            t_p,
            t_end,
            direction,
            alpha,
        })
    }

    /// Kick aligned with the momentum axis of a single mode.
    pub fn momentum_kick(t_p: f64, t_end: f64, alpha: f64) -> Result<Self> {
        Self::new(t_p, t_end, DVector::from_column_slice(&[0.0, 1.0]), alpha)
    }

    pub fn t_p(&self) -> f64 {
        self.t_p
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn direction(&self) -> &DVector<f64> {
        &self.direction
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Sum of the filtering and retrodiction covariances at a common time.
pub fn combined_covariance(
    forward: &DMatrix<f64>,
    backward: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if forward.shape() != backward.shape() {
        return Err(Error::ShapeMismatch(format!(
            "covariance shapes differ: {:?} vs {:?}",
            forward.shape(),
            backward.shape()
        )));
    }
    let scale = forward.norm().max(backward.norm());
    check_symmetric(forward, scale, "forward covariance")?;
    check_symmetric(backward, scale, "backward covariance")?;
    Ok(forward + backward)
}

/// Variance of the covariance `cov` projected on the unit direction `n`.
pub fn projected_variance(cov: &DMatrix<f64>, direction: &DVector<f64>) -> Result<f64> {
    if cov.nrows() != cov.ncols() || cov.nrows() != direction.len() {
        return Err(Error::ShapeMismatch(format!(
            "covariance {:?} does not match direction of length {}",
            cov.shape(),
            direction.len()
        )));
    }
    check_unit(direction)?;
    // Round-off on a PSD matrix can dip just below zero.
    Ok((direction.transpose() * cov * direction)[(0, 0)].max(0.0))
}

/// Projected estimation uncertainty √(nᵀ(Σ+Π)n) sampled on the shared grid.
///
/// Both trajectories must live on the same grid; entries pair each node time
/// with the uncertainty there.
pub fn uncertainty_timetrace(
    forward: &CovarianceTrajectory,
    backward: &CovarianceTrajectory,
    direction: &DVector<f64>,
) -> Result<Vec<(f64, f64)>> {
    let grid = forward.grid();
    if grid != backward.grid() {
        return Err(Error::InvalidGrid(format!(
            "trajectories live on different grids: {:?} vs {:?}",
            grid,
            backward.grid()
        )));
    }
    check_unit(direction)?;
    let mut out = Vec::with_capacity(grid.steps() + 1);
    for i in 0..=grid.steps() {
        let sum = forward.at_node(i) + backward.at_node(i);
        let var = (direction.transpose() * &sum * direction)[(0, 0)].max(0.0);
        out.push((grid.node(i), var.sqrt()));
    }
    Ok(out)
}

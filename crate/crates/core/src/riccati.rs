//! Differential Riccati equations for the conditional covariance.
//!
//! The forward flow propagates the filtering covariance Σ of a continuously
//! monitored linear Gaussian system,
//!
//! ```text
//! dΣ/dt = A Σ + Σ Aᵀ + Q − (Σ Cᵀ − Nᵀ) η (Σ Cᵀ − Nᵀ)ᵀ,
//! ```
//!
//! and the backward flow propagates the retrodiction covariance Π in reversed
//! time τ,
//!
//! ```text
//! dΠ/dτ = −A Π − Π Aᵀ + Q − (Π Cᵀ + Nᵀ) η (Π Cᵀ + Nᵀ)ᵀ.
//! ```
//!
//! Both are integrated with classic RK4 on a fixed grid, holding the model
//! matrices at each step's left endpoint. Steady states are found by running
//! the autonomous flow until the derivative norm settles; there is no
//! algebraic solver here, the settled value is all downstream code needs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::SystemMatrices;
use crate::linalg;
use crate::stepper::{FlatModel, StepOutcome, Stepper};

pub use crate::stepper::TOL_PSD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn backward(self) -> bool {
        matches!(self, Direction::Backward)
    }
}

// ─── Time grid ──────────────────────────────────────────────────────────────

/// Uniform grid of `steps` intervals over [t0, t1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !t0.is_finite() || !t1.is_finite() || t1 <= t0 {
            return Err(Error::InvalidGrid(format!(
                "need finite t0 < t1, got [{t0}, {t1}]"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        Ok(Self { t0, t1, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    /// Time of node `i`, for i in 0..=steps.
    pub fn node(&self, i: usize) -> f64 {
        self.t0 + self.dt() * i as f64
    }

    /// Index of the grid node nearest to `t`, clamped to the grid.
    pub fn nearest_node(&self, t: f64) -> usize {
        let raw = ((t - self.t0) / self.dt()).round();
        (raw.max(0.0) as usize).min(self.steps)
    }
}

// ─── Model schedules ────────────────────────────────────────────────────────

/// Supplies the model matrices for each integration step.
pub trait ModelSchedule {
    fn at_step(&self, step: usize) -> &SystemMatrices;
}

/// A constant model.
impl ModelSchedule for SystemMatrices {
    fn at_step(&self, _step: usize) -> &SystemMatrices {
        self
    }
}

// ─── Trajectories ───────────────────────────────────────────────────────────

/// Covariance at every node of a grid. For backward integrations the values
/// are stored in physical time order as well: `at_node(i)` is the covariance
/// at `grid.node(i)` regardless of the sweep direction.
#[derive(Debug, Clone)]
pub struct CovarianceTrajectory {
    grid: TimeGrid,
    values: Vec<DMatrix<f64>>,
}

impl CovarianceTrajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn at_node(&self, i: usize) -> &DMatrix<f64> {
        &self.values[i]
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().expect("trajectory is never empty")
    }
}

// ─── Right-hand sides ───────────────────────────────────────────────────────

fn check_state(s: &DMatrix<f64>, m: &SystemMatrices) -> Result<()> {
    m.validate()?;
    if s.nrows() != m.dim() || s.ncols() != m.dim() {
        return Err(Error::ShapeMismatch(format!(
            "covariance is {}x{}, model dimension is {}",
            s.nrows(),
            s.ncols(),
            m.dim()
        )));
    }
    Ok(())
}

fn rhs(s: &DMatrix<f64>, m: &SystemMatrices, dir: Direction) -> Result<DMatrix<f64>> {
    check_state(s, m)?;
    let nt_sign = if dir.backward() { 1.0 } else { -1.0 };
    let drift_sign = if dir.backward() { -1.0 } else { 1.0 };
    let gain = s * m.c.transpose() + nt_sign * m.n.transpose();
    let eta = DMatrix::from_diagonal(&DVector::from_iterator(
        m.eta.len(),
        m.eta.iter().copied(),
    ));
    let mut out =
        drift_sign * (&m.a * s + s * m.a.transpose()) + &m.q - &gain * eta * gain.transpose();
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// Derivative of the filtering covariance.
pub fn rhs_forward(s: &DMatrix<f64>, m: &SystemMatrices) -> Result<DMatrix<f64>> {
    rhs(s, m, Direction::Forward)
}

/// Derivative of the retrodiction covariance with respect to backward time.
pub fn rhs_backward(s: &DMatrix<f64>, m: &SystemMatrices) -> Result<DMatrix<f64>> {
    rhs(s, m, Direction::Backward)
}

// ─── Integration ────────────────────────────────────────────────────────────

fn init_state(init: &DMatrix<f64>, dim: usize) -> Result<Vec<f64>> {
    if init.nrows() != dim || init.ncols() != dim {
        return Err(Error::ShapeMismatch(format!(
            "initial covariance is {}x{}, model dimension is {dim}",
            init.nrows(),
            init.ncols()
        )));
    }
    let scale = init.trace() / dim as f64;
    linalg::check_symmetric(init, scale, "initial covariance")?;
    Ok(init.as_slice().to_vec())
}

fn outcome_to_err(out: StepOutcome, step: usize, t: f64) -> Result<()> {
    match out {
        StepOutcome::Ok | StepOutcome::Clipped => Ok(()),
        StepOutcome::NonFinite | StepOutcome::Indefinite => Err(Error::Diverged { step, t }),
    }
}

/// Integrates the covariance flow over `grid` and records every node.
///
/// For `Direction::Backward` the sweep runs in backward time: `init` is the
/// covariance at `grid.t1()` and the returned trajectory still indexes nodes
/// in physical time, so `at_node(0)` is the earliest instant.
pub fn integrate<M: ModelSchedule>(
    dir: Direction,
    init: &DMatrix<f64>,
    model: &M,
    grid: &TimeGrid,
) -> Result<CovarianceTrajectory> {
    let first = model.at_step(0);
    first.validate()?;
    let dim = first.dim();
    let mut s = init_state(init, dim)?;
    let mut stepper = Stepper::new(dim, first.channels());
    let dt = grid.dt();
    let steps = grid.steps();

    let mut values: Vec<DMatrix<f64>> = Vec::with_capacity(steps + 1);
    values.push(DMatrix::from_column_slice(dim, dim, &s));

    for k in 0..steps {
        // Physical step index: backward sweeps consume the grid from the end.
        let step_idx = if dir.backward() { steps - 1 - k } else { k };
        let m = model.at_step(step_idx);
        debug_assert_eq!(m.dim(), dim);
        let flat = FlatModel::new(m);
        let out = stepper.step(&mut s, &flat, dt, dir.backward());
        let t = if dir.backward() {
            grid.node(step_idx)
        } else {
            grid.node(k + 1)
        };
        outcome_to_err(out, step_idx, t)?;
        values.push(DMatrix::from_column_slice(dim, dim, &s));
    }

    if dir.backward() {
        values.reverse();
    }
    Ok(CovarianceTrajectory {
        grid: *grid,
        values,
    })
}

// ─── Steady states ──────────────────────────────────────────────────────────

/// Options for [`steady_state`]. `dt` sets both accuracy and the stability
/// limit and must resolve the fastest model timescale.
#[derive(Debug, Clone, Copy)]
pub struct SteadyStateOpts {
    pub dt: f64,
    /// Residual tolerance relative to the magnitude of the flow terms:
    /// converged when ‖rhs‖_F < tol · (1 + 2‖A‖_F‖S‖_F + ‖Q‖_F). The
    /// comparison scale matches the cancellation that defines the residual,
    /// so the criterion survives unit systems where ‖A‖‖S‖ is astronomically
    /// larger than the settled derivative.
    pub tol: f64,
    /// Give up after this much integrated time.
    pub max_time: f64,
}

impl SteadyStateOpts {
    pub fn new(dt: f64, max_time: f64) -> Self {
        Self {
            dt,
            tol: 1e-10,
            max_time,
        }
    }
}

/// Runs the autonomous flow from `init` until the derivative settles and
/// returns the settled covariance.
pub fn steady_state(
    dir: Direction,
    model: &SystemMatrices,
    init: &DMatrix<f64>,
    opts: &SteadyStateOpts,
) -> Result<DMatrix<f64>> {
    model.validate()?;
    if !(opts.dt > 0.0) || !(opts.max_time > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(
            "steady-state dt, tol and max_time must be positive".into(),
        ));
    }
    let dim = model.dim();
    let mut s = init_state(init, dim)?;
    let flat = FlatModel::new(model);
    let mut stepper = Stepper::new(dim, model.channels());
    let backward = dir.backward();
    let a_norm = model.a.norm();
    let q_norm = model.q.norm();
    let flow_scale = |s: &[f64]| {
        let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        1.0 + 2.0 * a_norm * s_norm + q_norm
    };

    let max_steps = (opts.max_time / opts.dt).ceil() as usize;
    let mut residual = f64::INFINITY;
    // Residual checks are cheap (one extra rhs); do them in small batches so
    // convergence is detected promptly without doubling the work.
    const CHECK_EVERY: usize = 8;
    for k in 0..max_steps {
        if k % CHECK_EVERY == 0 {
            residual = stepper.rhs_norm(&s, &flat, backward);
            if residual < opts.tol * flow_scale(&s) {
                return Ok(DMatrix::from_column_slice(dim, dim, &s));
            }
        }
        let out = stepper.step(&mut s, &flat, opts.dt, backward);
        outcome_to_err(out, k, opts.dt * k as f64)?;
    }
    residual = stepper.rhs_norm(&s, &flat, backward).min(residual);
    if residual < opts.tol * flow_scale(&s) {
        return Ok(DMatrix::from_column_slice(dim, dim, &s));
    }
    Err(Error::NoSteadyState {
        max_time: opts.max_time,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn scalar_model(a: f64, c: f64, q: f64, eta: f64, n: f64) -> SystemMatrices {
        SystemMatrices {
            a: dmatrix![a],
            c: dmatrix![c],
            q: dmatrix![q],
            n: dmatrix![n],
            eta: dvector![eta],
        }
    }

    /// Positive root of eta c² σ² − 2aσ − q = 0, found by bisection so the
    /// expected steady state does not reuse the integrator's arithmetic.
    fn scalar_steady_state_by_bisection(a: f64, c: f64, q: f64, eta: f64) -> f64 {
        let f = |s: f64| eta * c * c * s * s - 2.0 * a * s - q;
        let (mut lo, mut hi) = (0.0f64, 1e6f64);
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn scalar_forward_rhs_values() {
        let m = scalar_model(-1.0, 1.0, 1.0, 1.0, 0.0);
        // At σ = 0 the derivative is q.
        let r0 = rhs_forward(&dmatrix![0.0], &m).unwrap();
        assert_relative_eq!(r0[(0, 0)], 1.0, max_relative = 1e-15);
        // At the fixed point σ* = √2 − 1 the derivative vanishes.
        let sstar = 2.0f64.sqrt() - 1.0;
        let r = rhs_forward(&dmatrix![sstar], &m).unwrap();
        assert!(r[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn backward_equals_forward_with_flipped_drift() {
        let m = scalar_model(0.7, 1.3, 0.4, 0.8, 0.0);
        let m_flip = scalar_model(-0.7, 1.3, 0.4, 0.8, 0.0);
        for &s in &[0.0, 0.3, 2.0] {
            let b = rhs_backward(&dmatrix![s], &m).unwrap();
            let f = rhs_forward(&dmatrix![s], &m_flip).unwrap();
            assert_relative_eq!(b[(0, 0)], f[(0, 0)], max_relative = 1e-15);
        }
    }

    #[test]
    fn backward_rhs_flips_cross_correlation_sign() {
        let m = scalar_model(-0.5, 1.0, 1.0, 0.9, 0.3);
        let s = dmatrix![0.6];
        let f = rhs_forward(&s, &m).unwrap()[(0, 0)];
        let b = rhs_backward(&s, &m).unwrap()[(0, 0)];
        // f: drift +, gain (σc − n); b: drift −, gain (σc + n).
        let expect_f = -2.0 * 0.5 * 0.6 + 1.0 - 0.9 * (0.6 - 0.3f64).powi(2);
        let expect_b = 2.0 * 0.5 * 0.6 + 1.0 - 0.9 * (0.6 + 0.3f64).powi(2);
        assert_relative_eq!(f, expect_f, max_relative = 1e-14);
        assert_relative_eq!(b, expect_b, max_relative = 1e-14);
    }

    #[test]
    fn integrate_keeps_fixed_point() {
        let m = scalar_model(-1.0, 1.0, 1.0, 1.0, 0.0);
        let sstar = 2.0f64.sqrt() - 1.0;
        let grid = TimeGrid::new(0.0, 5.0, 500).unwrap();
        let traj = integrate(Direction::Forward, &dmatrix![sstar], &m, &grid).unwrap();
        assert_eq!(traj.values().len(), 501);
        for v in traj.values() {
            assert_relative_eq!(v[(0, 0)], sstar, max_relative = 1e-10);
        }
    }

    #[test]
    fn integrate_matches_exponential_decay() {
        // With C = 0, Q = 0 the scalar flow is σ' = 2aσ with solution σ0 e^{2at}.
        let m = SystemMatrices {
            a: dmatrix![-1.0],
            c: DMatrix::zeros(0, 1),
            q: dmatrix![0.0],
            n: DMatrix::zeros(0, 1),
            eta: dvector![],
        };
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let traj = integrate(Direction::Forward, &dmatrix![0.8], &m, &grid).unwrap();
        let expect = 0.8 * (-2.0f64).exp();
        assert_relative_eq!(traj.last()[(0, 0)], expect, max_relative = 1e-9);
    }

    #[test]
    fn rk4_is_fourth_order_on_linear_decay() {
        let m = SystemMatrices {
            a: dmatrix![-1.0],
            c: DMatrix::zeros(0, 1),
            q: dmatrix![0.0],
            n: DMatrix::zeros(0, 1),
            eta: dvector![],
        };
        let exact = 0.8 * (-2.0f64).exp();
        let err = |steps: usize| {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let traj = integrate(Direction::Forward, &dmatrix![0.8], &m, &grid).unwrap();
            (traj.last()[(0, 0)] - exact).abs()
        };
        let e1 = err(25);
        let e2 = err(50);
        let order = (e1 / e2).log2();
        assert!(order > 3.8, "observed order {order}");
    }

    #[test]
    fn integrate_reports_divergence_step() {
        // RK4 is unstable at Ω·dt ≫ 1; the state blows up to non-finite values.
        let m = SystemMatrices {
            a: dmatrix![0.0, 1e8; -1e8, 0.0],
            c: DMatrix::zeros(0, 2),
            q: DMatrix::zeros(2, 2),
            n: DMatrix::zeros(0, 2),
            eta: dvector![],
        };
        let grid = TimeGrid::new(0.0, 100.0, 100).unwrap();
        // Anisotropic start: an isotropic covariance would be a fixed point
        // of pure rotation no matter how coarse the step.
        let init = dmatrix![2.0, 0.0; 0.0, 1.0];
        let err = integrate(Direction::Forward, &init, &m, &grid).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn integrate_rejects_inconsistent_noise_model() {
        // Cross-correlation stronger than the joint noise allows drives the
        // covariance indefinite, which must surface as divergence.
        let m = scalar_model(-1.0, 1.0, 1.0, 1.0, 10.0);
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let err = integrate(Direction::Forward, &dmatrix![0.01], &m, &grid).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn steady_state_scalar_oracle() {
        let m = scalar_model(-1.0, 1.0, 1.0, 1.0, 0.0);
        let opts = SteadyStateOpts::new(1e-3, 100.0);
        let ss = steady_state(Direction::Forward, &m, &dmatrix![0.0], &opts).unwrap();
        let expect = scalar_steady_state_by_bisection(-1.0, 1.0, 1.0, 1.0);
        assert_relative_eq!(expect, 2.0f64.sqrt() - 1.0, epsilon = 1e-12);
        assert_relative_eq!(ss[(0, 0)], expect, epsilon = 1e-8);
    }

    #[test]
    fn steady_state_reaches_zero_for_undriven_stable_system() {
        let m = SystemMatrices {
            a: dmatrix![-1.0],
            c: DMatrix::zeros(0, 1),
            q: dmatrix![0.0],
            n: DMatrix::zeros(0, 1),
            eta: dvector![],
        };
        let opts = SteadyStateOpts::new(1e-3, 100.0);
        let ss = steady_state(Direction::Forward, &m, &dmatrix![3.0], &opts).unwrap();
        assert!(ss[(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn steady_state_times_out_on_marginal_system() {
        // Pure rotation with diffusion never settles.
        let m = SystemMatrices {
            a: dmatrix![0.0, 1.0; -1.0, 0.0],
            c: DMatrix::zeros(0, 2),
            q: DMatrix::identity(2, 2),
            n: DMatrix::zeros(0, 2),
            eta: dvector![],
        };
        let opts = SteadyStateOpts::new(1e-2, 10.0);
        let err = steady_state(Direction::Forward, &m, &DMatrix::identity(2, 2), &opts).unwrap_err();
        assert!(matches!(err, Error::NoSteadyState { .. }));
    }

    #[test]
    fn backward_steady_state_matches_forward_of_reversed_drift() {
        let m = SystemMatrices {
            a: dmatrix![0.0, 2.0; -2.0, -0.3],
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            q: dmatrix![0.0, 0.0; 0.0, 0.5],
            n: DMatrix::zeros(1, 2),
            eta: dvector![0.7],
        };
        let m_rev = SystemMatrices {
            a: -m.a.clone(),
            ..m.clone()
        };
        let opts = SteadyStateOpts::new(1e-3, 500.0);
        let init = DMatrix::identity(2, 2) * 0.5;
        let back = steady_state(Direction::Backward, &m, &init, &opts).unwrap();
        let fwd = steady_state(Direction::Forward, &m_rev, &init, &opts).unwrap();
        assert_relative_eq!(back, fwd, max_relative = 1e-9);
    }

    #[test]
    fn trajectory_nodes_stay_psd() {
        let m = SystemMatrices {
            a: dmatrix![0.0, 3.0; -3.0, -0.1],
            c: DMatrix::from_row_slice(1, 2, &[2.0, 0.0]),
            q: dmatrix![0.0, 0.0; 0.0, 1.0],
            n: DMatrix::zeros(1, 2),
            eta: dvector![1.0],
        };
        let grid = TimeGrid::new(0.0, 20.0, 4000).unwrap();
        let init = DMatrix::identity(2, 2) * 5.0;
        let traj = integrate(Direction::Forward, &init, &m, &grid).unwrap();
        for v in traj.values() {
            let scale = v.trace() / 2.0;
            assert!(crate::linalg::sym_min_eig(v) >= -TOL_PSD * scale.max(1.0));
        }
    }

    #[test]
    fn grid_validation_and_lookup() {
        assert!(TimeGrid::new(0.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        assert_relative_eq!(g.dt(), 0.01, max_relative = 1e-15);
        assert_eq!(g.nearest_node(0.504), 50);
        assert_eq!(g.nearest_node(-3.0), 0);
        assert_eq!(g.nearest_node(7.0), 100);
        assert_relative_eq!(g.node(100), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn backward_integration_indexes_physical_time() {
        // dΠ/dτ = Q with A = 0, C absent: Π(τ) = Π_T + Q τ, so the node at
        // physical time t carries Π_T + Q (t1 − t).
        let m = SystemMatrices {
            a: dmatrix![0.0],
            c: DMatrix::zeros(0, 1),
            q: dmatrix![2.0],
            n: DMatrix::zeros(0, 1),
            eta: dvector![],
        };
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let traj = integrate(Direction::Backward, &dmatrix![1.0], &m, &grid).unwrap();
        assert_relative_eq!(traj.at_node(10)[(0, 0)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(traj.at_node(0)[(0, 0)], 3.0, max_relative = 1e-10);
        assert_relative_eq!(traj.at_node(5)[(0, 0)], 2.0, max_relative = 1e-10);
    }
}

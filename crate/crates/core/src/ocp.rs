//! Optimization of piecewise-constant drive protocols that minimize the
//! impulse-estimation variance.
//!
//! The decision variable is one drive value per control interval. The cost is
//! the kick-direction projection of Σ(t_p) + Π(t_p), with Σ integrated forward
//! from Σ_ss(p₀) and Π backward from Π_ss(p_K), plus an L1 penalty on the
//! drive. A projected-gradient method with Armijo backtracking minimizes it
//! inside the drive box; gradients come from central finite differences, with
//! each probe resuming from a cached covariance checkpoint so only the leg the
//! perturbed interval can influence is re-integrated.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gaussian::SystemMatrices;
use crate::impulse::{projected_variance, ImpulseProblem};
use crate::riccati::{
    integrate, steady_state, CovarianceTrajectory, Direction, ModelSchedule, SteadyStateOpts,
    TimeGrid,
};
use crate::stepper::{FlatModel, StepOutcome, Stepper};
use crate::systems::ParametricModel;

// ─── Protocols ──────────────────────────────────────────────────────────────

/// Piecewise-constant drive signal: one value per interval of `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProtocol {
    grid: TimeGrid,
    p: Vec<f64>,
    p_min: f64,
    p_max: f64,
}

impl ControlProtocol {
    pub fn new(grid: TimeGrid, p: Vec<f64>, bounds: (f64, f64)) -> Result<Self> {
        let (p_min, p_max) = bounds;
        if !p_min.is_finite() || !p_max.is_finite() || p_min >= p_max {
            return Err(Error::InvalidParameter(format!(
                "need p_min < p_max, got [{p_min}, {p_max}]"
            )));
        }
        if p.len() != grid.steps() {
            return Err(Error::ShapeMismatch(format!(
                "{} control values on a grid of {} intervals",
                p.len(),
                grid.steps()
            )));
        }
        for &v in &p {
            if !v.is_finite() || v < p_min || v > p_max {
                return Err(Error::DriveOutOfBounds {
                    value: v,
                    min: p_min,
                    max: p_max,
                });
            }
        }
        Ok(Self {
            grid,
            p,
            p_min,
            p_max,
        })
    }

    /// The undriven protocol. The box must contain zero.
    pub fn zero(grid: TimeGrid, bounds: (f64, f64)) -> Result<Self> {
        let k = grid.steps();
        Self::new(grid, vec![0.0; k], bounds)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.p_min, self.p_max)
    }

    /// Drive value at time `t`, clamped to the grid span.
    pub fn value_at(&self, t: f64) -> f64 {
        let dt = self.grid.dt();
        let idx = ((t - self.grid.t0()) / dt).floor();
        let k = (idx.max(0.0) as usize).min(self.p.len() - 1);
        self.p[k]
    }
}

// ─── Solver configuration ───────────────────────────────────────────────────

/// Knobs of the transcription and the projected-gradient solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcpConfig {
    /// L1 drive penalty weight, 1/s.
    pub gamma_reg: f64,
    pub max_iters: usize,
    /// Termination threshold on the projected-gradient norm, relative to the
    /// initial cost.
    pub grad_tol: f64,
    /// Central finite-difference probe size in drive units.
    pub fd_step: f64,
    /// Integrator steps per control interval.
    pub control_stride: usize,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            gamma_reg: 0.0,
            max_iters: 200,
            grad_tol: 1e-6,
            fd_step: 1e-5,
            control_stride: 10,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_reg >= 0.0) || !self.gamma_reg.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma_reg must be finite and nonnegative, got {}",
                self.gamma_reg
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::InvalidParameter(
                "grad_tol and fd_step must be positive".into(),
            ));
        }
        if self.control_stride == 0 {
            return Err(Error::InvalidParameter(
                "control_stride must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of [`optimize`].
#[derive(Debug, Clone)]
pub struct OcpResult {
    pub protocol: ControlProtocol,
    /// Cost at the initial protocol followed by every accepted iterate.
    pub cost_history: Vec<f64>,
    pub final_cost: f64,
    pub final_projected_variance: f64,
    /// Projected variance of the undriven (zero-protocol) baseline.
    pub steady_state_projected_variance: f64,
    /// final_projected_variance / steady_state_projected_variance.
    pub ratio: f64,
    /// Set when no descent step was found at the first iterate.
    pub stalled: bool,
}

// ─── Transcription ──────────────────────────────────────────────────────────

/// Piecewise-constant model over the integration grid: fine step j uses the
/// matrices of control interval (offset + j) / stride.
pub(crate) struct PiecewiseSchedule<'a> {
    pub(crate) mats: &'a [SystemMatrices],
    pub(crate) stride: usize,
    /// Fine-step index of the sub-grid's first step within the full horizon.
    pub(crate) offset: usize,
}

impl ModelSchedule for PiecewiseSchedule<'_> {
    fn at_step(&self, step: usize) -> &SystemMatrices {
        &self.mats[(self.offset + step) / self.stride]
    }
}

struct Transcription {
    dim: usize,
    channels: usize,
    stride: usize,
    dt: f64,
    dt_ctrl: f64,
    /// Control-node index of the kick time.
    jc: usize,
    k_total: usize,
    flats: Vec<FlatModel>,
    /// Σ_ss at the first control value, flattened column-major.
    sigma_start: Vec<f64>,
    /// Π_ss at the last control value.
    pi_end: Vec<f64>,
}

fn infeasible(err: Error, what: &str) -> Error {
    match err {
        Error::Diverged { step, t } => Error::InfeasibleProtocol(format!(
            "{what}: covariance flow diverged at step {step} (t = {t:.6e})"
        )),
        Error::NoSteadyState { max_time, residual } => Error::InfeasibleProtocol(format!(
            "{what}: no steady state within {max_time:.3e} s (residual {residual:.3e})"
        )),
        other => other,
    }
}

pub(crate) fn boundary_steady_state(
    dir: Direction,
    model: &ParametricModel,
    p: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let mats = model.matrices(p)?;
    let opts = SteadyStateOpts::new(
        dt,
        200.0 * model.relaxation_time().max(model.reference_period()),
    );
    let init = DMatrix::identity(mats.dim(), mats.dim());
    let ss = steady_state(dir, &mats, &init, &opts)
        .map_err(|e| infeasible(e, "boundary condition"))?;
    Ok(ss.as_slice().to_vec())
}

impl Transcription {
    fn build(
        protocol: &ControlProtocol,
        model: &ParametricModel,
        problem: &ImpulseProblem,
        cfg: &OcpConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let grid = protocol.grid();
        if grid.t0() != 0.0 {
            return Err(Error::InvalidGrid(format!(
                "control grid must start at t = 0, got {}",
                grid.t0()
            )));
        }
        if (grid.t1() - problem.t_end()).abs() > 1e-9 * problem.t_end() {
            return Err(Error::InvalidGrid(format!(
                "control grid ends at {} but the horizon is {}",
                grid.t1(),
                problem.t_end()
            )));
        }
        let (lo, hi) = protocol.bounds();
        let (mlo, mhi) = model.bounds();
        if lo < mlo || hi > mhi {
            return Err(Error::InvalidParameter(format!(
                "protocol bounds [{lo}, {hi}] exceed the model's [{mlo}, {mhi}]"
            )));
        }
        let jc = grid.nearest_node(problem.t_p());
        if (grid.node(jc) - problem.t_p()).abs() > 1e-6 * grid.dt() {
            return Err(Error::InvalidGrid(format!(
                "kick time {} does not coincide with a control-grid node",
                problem.t_p()
            )));
        }
        let k_total = grid.steps();
        if jc == 0 || jc == k_total {
            return Err(Error::InvalidGrid(
                "kick time must be an interior control-grid node".into(),
            ));
        }

        let mats: Vec<SystemMatrices> = protocol
            .values()
            .iter()
            .map(|&p| model.matrices(p))
            .collect::<Result<_>>()?;
        let dim = mats[0].dim();
        let channels = mats[0].channels();
        let dt_ctrl = grid.dt();
        let dt = dt_ctrl / cfg.control_stride as f64;
        let flats = mats.iter().map(FlatModel::new).collect();

        let sigma_start =
            boundary_steady_state(Direction::Forward, model, protocol.values()[0], dt)?;
        let pi_end = boundary_steady_state(
            Direction::Backward,
            model,
            protocol.values()[k_total - 1],
            dt,
        )?;

        Ok(Self {
            dim,
            channels,
            stride: cfg.control_stride,
            dt,
            dt_ctrl,
            jc,
            k_total,
            flats,
            sigma_start,
            pi_end,
        })
    }

    /// Steps `state` across control intervals [k0, k1), forward in time,
    /// using `replace` for one interval's model when given.
    fn run_forward(
        &self,
        stepper: &mut Stepper,
        state: &mut [f64],
        k0: usize,
        k1: usize,
        replace: Option<(usize, &FlatModel)>,
    ) -> Result<()> {
        for k in k0..k1 {
            let flat = match replace {
                Some((kr, f)) if kr == k => f,
                _ => &self.flats[k],
            };
            for s in 0..self.stride {
                let out = stepper.step(state, flat, self.dt, false);
                self.check(out, k, s)?;
            }
        }
        Ok(())
    }

    /// Steps `state` across control intervals [k0, k1) in backward time,
    /// starting from the covariance at control node k1.
    fn run_backward(
        &self,
        stepper: &mut Stepper,
        state: &mut [f64],
        k0: usize,
        k1: usize,
        replace: Option<(usize, &FlatModel)>,
    ) -> Result<()> {
        for k in (k0..k1).rev() {
            let flat = match replace {
                Some((kr, f)) if kr == k => f,
                _ => &self.flats[k],
            };
            for s in 0..self.stride {
                let out = stepper.step(state, flat, self.dt, true);
                self.check(out, k, s)?;
            }
        }
        Ok(())
    }

    fn check(&self, out: StepOutcome, k: usize, s: usize) -> Result<()> {
        match out {
            StepOutcome::Ok | StepOutcome::Clipped => Ok(()),
            StepOutcome::NonFinite | StepOutcome::Indefinite => {
                Err(Error::InfeasibleProtocol(format!(
                    "covariance flow diverged in control interval {k} (fine step {s})"
                )))
            }
        }
    }

    fn stepper(&self) -> Stepper {
        Stepper::new(self.dim, self.channels)
    }

    fn to_matrix(&self, state: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim, self.dim, state)
    }
}

fn regularizer(p: &[f64], gamma_reg: f64, dt_ctrl: f64) -> f64 {
    gamma_reg * dt_ctrl * p.iter().map(|v| v.abs()).sum::<f64>()
}

// ─── Cost and gradient ──────────────────────────────────────────────────────

/// Filtering and retrodiction covariances at the kick time under `protocol`.
pub fn covariances_at_kick(
    protocol: &ControlProtocol,
    model: &ParametricModel,
    problem: &ImpulseProblem,
    cfg: &OcpConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let tr = Transcription::build(protocol, model, problem, cfg)?;
    let mut stepper = tr.stepper();
    let mut sigma = tr.sigma_start.clone();
    tr.run_forward(&mut stepper, &mut sigma, 0, tr.jc, None)?;
    let mut pi = tr.pi_end.clone();
    tr.run_backward(&mut stepper, &mut pi, tr.jc, tr.k_total, None)?;
    Ok((tr.to_matrix(&sigma), tr.to_matrix(&pi)))
}

/// Total cost (projected variance at t_p plus L1 drive penalty) and the
/// variance term alone.
pub fn evaluate_cost(
    protocol: &ControlProtocol,
    model: &ParametricModel,
    problem: &ImpulseProblem,
    cfg: &OcpConfig,
) -> Result<(f64, f64)> {
    let (sigma, pi) = covariances_at_kick(protocol, model, problem, cfg)?;
    let var = projected_variance(&(sigma + pi), problem.direction())?;
    let reg = regularizer(protocol.values(), cfg.gamma_reg, protocol.grid().dt());
    Ok((var + reg, var))
}

/// Full-horizon covariance trajectories on the integration grid: Σ forward
/// from Σ_ss(p₀) over [t0, t1] and Π backward from Π_ss(p_K) over the same
/// span. Useful for uncertainty time traces; the kick time plays no role.
pub fn covariance_traces(
    protocol: &ControlProtocol,
    model: &ParametricModel,
    cfg: &OcpConfig,
) -> Result<(CovarianceTrajectory, CovarianceTrajectory)> {
    cfg.validate()?;
    let grid = protocol.grid();
    let mats: Vec<SystemMatrices> = protocol
        .values()
        .iter()
        .map(|&p| model.matrices(p))
        .collect::<Result<_>>()?;
    let fine = TimeGrid::new(
        grid.t0(),
        grid.t1(),
        grid.steps() * cfg.control_stride,
    )?;
    let dt = fine.dt();
    let dim = mats[0].dim();
    let sigma0 = boundary_steady_state(Direction::Forward, model, protocol.values()[0], dt)?;
    let pi_end = boundary_steady_state(
        Direction::Backward,
        model,
        protocol.values()[grid.steps() - 1],
        dt,
    )?;
    let schedule = PiecewiseSchedule {
        mats: &mats,
        stride: cfg.control_stride,
        offset: 0,
    };
    let sigma = integrate(
        Direction::Forward,
        &DMatrix::from_column_slice(dim, dim, &sigma0),
        &schedule,
        &fine,
    )
    .map_err(|e| infeasible(e, "forward trace"))?;
    let pi = integrate(
        Direction::Backward,
        &DMatrix::from_column_slice(dim, dim, &pi_end),
        &schedule,
        &fine,
    )
    .map_err(|e| infeasible(e, "backward trace"))?;
    Ok((sigma, pi))
}

/// Central finite-difference gradient of [`evaluate_cost`] in the control
/// values. Probes are clamped to the protocol box (one-sided at the faces);
/// only the leg a control can influence is re-integrated, resuming from the
/// cached covariance at that interval's entry node.
pub fn gradient(
    protocol: &ControlProtocol,
    model: &ParametricModel,
    problem: &ImpulseProblem,
    cfg: &OcpConfig,
) -> Result<Vec<f64>> {
    let tr = Transcription::build(protocol, model, problem, cfg)?;
    let mut stepper = tr.stepper();
    let p = protocol.values();
    let (p_min, p_max) = protocol.bounds();
    let direction = problem.direction();

    // Base sweep with covariance checkpoints at every control node.
    let mut fwd_chk: Vec<Vec<f64>> = Vec::with_capacity(tr.jc + 1);
    let mut state = tr.sigma_start.clone();
    fwd_chk.push(state.clone());
    for k in 0..tr.jc {
        tr.run_forward(&mut stepper, &mut state, k, k + 1, None)?;
        fwd_chk.push(state.clone());
    }
    // bwd_chk[i] holds Π at control node jc + i.
    let n_back = tr.k_total - tr.jc;
    let mut bwd_chk: Vec<Vec<f64>> = vec![Vec::new(); n_back + 1];
    let mut state = tr.pi_end.clone();
    bwd_chk[n_back] = state.clone();
    for k in (tr.jc..tr.k_total).rev() {
        tr.run_backward(&mut stepper, &mut state, k, k + 1, None)?;
        bwd_chk[k - tr.jc] = state.clone();
    }

    let sigma_tp = tr.to_matrix(&fwd_chk[tr.jc]);
    let pi_tp = tr.to_matrix(&bwd_chk[0]);
    let reg_base = regularizer(p, cfg.gamma_reg, tr.dt_ctrl);

    let mut cost_probe = |k: usize, value: f64| -> Result<f64> {
        let probe_mats = model.matrices(value)?;
        let probe_flat = FlatModel::new(&probe_mats);
        let combined = if k < tr.jc {
            let mut state = if k == 0 {
                boundary_steady_state(Direction::Forward, model, value, tr.dt)?
            } else {
                fwd_chk[k].clone()
            };
            tr.run_forward(&mut stepper, &mut state, k, tr.jc, Some((k, &probe_flat)))?;
            tr.to_matrix(&state) + &pi_tp
        } else {
            let mut state = if k == tr.k_total - 1 {
                boundary_steady_state(Direction::Backward, model, value, tr.dt)?
            } else {
                bwd_chk[k + 1 - tr.jc].clone()
            };
            tr.run_backward(&mut stepper, &mut state, tr.jc, k + 1, Some((k, &probe_flat)))?;
            tr.to_matrix(&state) + &sigma_tp
        };
        let var = projected_variance(&combined, direction)?;
        let reg = reg_base + cfg.gamma_reg * tr.dt_ctrl * (value.abs() - p[k].abs());
        Ok(var + reg)
    };

    let mut g = Vec::with_capacity(tr.k_total);
    for k in 0..tr.k_total {
        let hi = (p[k] + cfg.fd_step).min(p_max);
        let lo = (p[k] - cfg.fd_step).max(p_min);
        if hi <= lo {
            return Err(Error::GradientUnavailable(format!(
                "control {k}: both probes collapse onto {} in [{p_min}, {p_max}]",
                p[k]
            )));
        }
        let c_hi = cost_probe(k, hi)?;
        let c_lo = cost_probe(k, lo)?;
        g.push((c_hi - c_lo) / (hi - lo));
    }
    Ok(g)
}

// ─── Optimizer ──────────────────────────────────────────────────────────────

fn clamp_all(p: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    p.iter().map(|v| v.clamp(lo, hi)).collect()
}

/// Minimizes the impulse-estimation cost by projected gradient descent with
/// Armijo backtracking, starting from `init`. Deterministic; accepted
/// iterates have strictly non-increasing cost.
pub fn optimize(
    model: &ParametricModel,
    problem: &ImpulseProblem,
    cfg: &OcpConfig,
    init: &ControlProtocol,
) -> Result<OcpResult> {
    const ARMIJO_C1: f64 = 1e-4;
    const BACKTRACK: f64 = 0.5;
    const MAX_BACKTRACKS: usize = 40;

    let (lo, hi) = init.bounds();
    if lo > 0.0 || hi < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "drive box [{lo}, {hi}] must contain zero for the baseline comparison"
        )));
    }
    let grid = *init.grid();
    let zero = ControlProtocol::zero(grid, (lo, hi))?;
    let (_, zero_var) = evaluate_cost(&zero, model, problem, cfg)?;

    let (c0, var0) = evaluate_cost(init, model, problem, cfg)?;
    let grad_threshold = cfg.grad_tol * c0.abs();

    let mut p_cur = init.values().to_vec();
    let mut c_cur = c0;
    let mut var_cur = var0;
    let mut cost_history = vec![c0];
    let mut stalled = false;
    let mut step = f64::NAN;

    for iter in 0..cfg.max_iters {
        let proto_cur = ControlProtocol::new(grid, p_cur.clone(), (lo, hi))?;
        let g = gradient(&proto_cur, model, problem, cfg)?;

        let pg_norm = p_cur
            .iter()
            .zip(&g)
            .map(|(&p, &gi)| {
                let moved = (p - gi).clamp(lo, hi);
                (p - moved) * (p - moved)
            })
            .sum::<f64>()
            .sqrt();
        if pg_norm < grad_threshold {
            break;
        }

        if step.is_nan() {
            let g_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            step = 0.1 * (hi - lo) / g_inf.max(f64::MIN_POSITIVE);
        }

        // Backtracking line search along the projection arc.
        let mut alpha = 2.0 * step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = p_cur
                .iter()
                .zip(&g)
                .map(|(&p, &gi)| (p - alpha * gi).clamp(lo, hi))
                .collect();
            let directional: f64 = p_cur
                .iter()
                .zip(&trial)
                .zip(&g)
                .map(|((&p, &t), &gi)| gi * (p - t))
                .sum();
            if directional > 0.0 {
                let proto_trial = ControlProtocol::new(grid, trial.clone(), (lo, hi))?;
                match evaluate_cost(&proto_trial, model, problem, cfg) {
                    Ok((c_t, v_t)) => {
                        if c_t <= c_cur - ARMIJO_C1 * directional {
                            accepted = Some((trial, c_t, v_t, alpha));
                            break;
                        }
                    }
                    Err(Error::InfeasibleProtocol(_)) => {}
                    Err(other) => return Err(other),
                }
            }
            alpha *= BACKTRACK;
        }

        match accepted {
            Some((trial, c_t, v_t, used)) => {
                p_cur = trial;
                c_cur = c_t;
                var_cur = v_t;
                step = used;
                cost_history.push(c_t);
            }
            None => {
                stalled = iter == 0;
                break;
            }
        }
    }

    let protocol = ControlProtocol::new(grid, clamp_all(&p_cur, lo, hi), (lo, hi))?;
    Ok(OcpResult {
        protocol,
        cost_history,
        final_cost: c_cur,
        final_projected_variance: var_cur,
        steady_state_projected_variance: zero_var,
        ratio: var_cur / zero_var,
        stalled,
    })
}

/// Penalty weight for which the full-horizon, full-depth drive would cost 5%
/// of the undriven projected variance.
pub fn default_gamma_reg(
    model: &ParametricModel,
    problem: &ImpulseProblem,
    grid: &TimeGrid,
    cfg: &OcpConfig,
) -> Result<f64> {
    let (_, hi) = model.bounds();
    let zero = ControlProtocol::zero(*grid, model.bounds())?;
    let probe_cfg = OcpConfig {
        gamma_reg: 0.0,
        ..*cfg
    };
    let (_, zero_var) = evaluate_cost(&zero, model, problem, &probe_cfg)?;
    Ok(0.05 * zero_var / (hi * (grid.t1() - grid.t0())))
}

// ─── Reference square-wave drives ───────────────────────────────────────────

fn square_sign(theta: f64) -> f64 {
    if theta.rem_euclid(2.0 * std::f64::consts::PI) < std::f64::consts::PI {
        1.0
    } else {
        -1.0
    }
}

fn check_window(grid: &TimeGrid, window: (f64, f64)) -> Result<()> {
    let (ta, tb) = window;
    let tol = 1e-9 * (grid.t1() - grid.t0());
    if !(ta.is_finite() && tb.is_finite()) || ta > tb {
        return Err(Error::InvalidParameter(format!(
            "window [{ta}, {tb}] is not an interval"
        )));
    }
    if ta < grid.t0() - tol || tb > grid.t1() + tol {
        return Err(Error::InvalidParameter(format!(
            "window [{ta}, {tb}] extends outside the grid [{}, {}]",
            grid.t0(),
            grid.t1()
        )));
    }
    Ok(())
}

fn check_depth(depth: f64, bounds: (f64, f64)) -> Result<()> {
    let (lo, hi) = bounds;
    for v in [0.0, depth, -depth] {
        if !v.is_finite() || v < lo || v > hi {
            return Err(Error::DriveOutOfBounds {
                value: v,
                min: lo,
                max: hi,
            });
        }
    }
    Ok(())
}

/// Fixed-clock square-wave drive: ±depth at angular `frequency` inside the
/// window, zero outside. Interval values are sampled at interval midpoints.
pub fn rectangular_protocol(
    grid: &TimeGrid,
    frequency: f64,
    depth: f64,
    phase: f64,
    window: (f64, f64),
    bounds: (f64, f64),
) -> Result<ControlProtocol> {
    if !(frequency > 0.0) || !frequency.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "square-wave frequency must be positive, got {frequency}"
        )));
    }
    check_depth(depth, bounds)?;
    check_window(grid, window)?;
    let (ta, tb) = window;
    let dt = grid.dt();
    let p = (0..grid.steps())
        .map(|k| {
            let mid = grid.node(k) + 0.5 * dt;
            if mid >= ta && mid < tb {
                depth * square_sign(frequency * (mid - ta) + phase)
            } else {
                0.0
            }
        })
        .collect();
    ControlProtocol::new(*grid, p, bounds)
}

/// Square-wave drive with switching times tied to the drive-dependent
/// oscillation frequency: the square wave flips each time the accumulated
/// phase of the doubled instantaneous frequency advances by π, so each full
/// modulation cycle spans half an instantaneous mechanical cycle. With a
/// constant `instantaneous_frequency` Ω₀ this reduces to the fixed-clock wave
/// at 2Ω₀.
pub fn rectangular_protocol_adjusted(
    grid: &TimeGrid,
    instantaneous_frequency: impl Fn(f64) -> f64,
    depth: f64,
    phase: f64,
    window: (f64, f64),
    bounds: (f64, f64),
) -> Result<ControlProtocol> {
    check_depth(depth, bounds)?;
    check_window(grid, window)?;
    let (ta, tb) = window;
    let dt = grid.dt();
    let mut theta = phase;
    let mut p = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let mid = grid.node(k) + 0.5 * dt;
        if mid >= ta && mid < tb {
            let value = depth * square_sign(theta);
            let freq = instantaneous_frequency(value);
            if !(freq > 0.0) || !freq.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "instantaneous frequency must stay positive, got {freq} at p = {value}"
                )));
            }
            theta += 2.0 * freq * dt;
            p.push(value);
        } else {
            p.push(0.0);
        }
    }
    ControlProtocol::new(*grid, p, bounds)
}

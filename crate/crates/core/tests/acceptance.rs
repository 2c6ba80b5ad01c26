//! End-to-end acceptance checks for the impulse-estimation toolkit.
//!
//! Each test prints one `[criterion NN] PASS/FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`) and asserts the checked
//! bounds together with its own runtime budget. Work shared across criteria
//! (the reference resonator's optimized protocol and its driven covariance
//! traces) is computed once; its wall time is charged to the criterion that
//! owns it, not to every test that reads the cached result.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{dmatrix, dvector, DMatrix};

use kickopt::gaussian::{check_uncertainty, SystemMatrices};
use kickopt::impulse::{projected_variance, ImpulseProblem};
use kickopt::montecarlo::Simulator;
use kickopt::ocp::{
    covariance_traces, covariances_at_kick, default_gamma_reg, evaluate_cost, optimize,
    rectangular_protocol, ControlProtocol, OcpConfig, OcpResult,
};
use kickopt::riccati::{
    integrate, rhs_forward, steady_state, CovarianceTrajectory, Direction, SteadyStateOpts,
    TimeGrid,
};
use kickopt::systems::{
    nems_model, particle_model, NemsParams, ParametricModel, ParticleParams,
};

const K_CTRL: usize = 1000;
const PERIODS: f64 = 50.0;

/// Heavy shared state for the resonator criteria: the zero-protocol baseline,
/// the square-wave drive traces, and the optimized protocol.
struct NemsShared {
    model: ParametricModel,
    grid: TimeGrid,
    problem: ImpulseProblem,
    cfg: OcpConfig,
    zero: ControlProtocol,
    /// nᵀ(Σ_ss + Π_ss)n for the undriven system.
    zero_var: f64,
    /// nᵀΣ_ss n, the forward filter's stationary momentum variance.
    fwd_ss_var: f64,
    rect: ControlProtocol,
    rect_sigma: CovarianceTrajectory,
    rect_pi: CovarianceTrajectory,
    rect_secs: f64,
    opt: OcpResult,
    opt_secs: f64,
}

static NEMS: OnceLock<NemsShared> = OnceLock::new();

fn nems() -> &'static NemsShared {
    NEMS.get_or_init(|| {
        let model = nems_model(&NemsParams::reference()).unwrap();
        let period = model.reference_period();
        let omega0 = 2.0 * std::f64::consts::PI / period;
        let grid = TimeGrid::new(0.0, PERIODS * period, K_CTRL).unwrap();
        let t_p = grid.node(K_CTRL / 2);
        let problem = ImpulseProblem::momentum_kick(t_p, grid.t1(), 5.0).unwrap();
        let bounds = model.bounds();
        let zero = ControlProtocol::zero(grid, bounds).unwrap();

        let base_cfg = OcpConfig::default();
        let gamma = default_gamma_reg(&model, &problem, &grid, &base_cfg).unwrap();
        let cfg = OcpConfig {
            gamma_reg: gamma,
            ..base_cfg
        };

        let (_, zero_var) = evaluate_cost(&zero, &model, &problem, &cfg).unwrap();
        let (zero_sigma, _) = covariance_traces(&zero, &model, &cfg).unwrap();
        let fwd_ss_var =
            projected_variance(zero_sigma.at_node(0), problem.direction()).unwrap();

        let rect = rectangular_protocol(
            &grid,
            2.0 * omega0,
            0.4,
            0.0,
            (0.0, grid.t1()),
            bounds,
        )
        .unwrap();
        let t0 = Instant::now();
        let (rect_sigma, rect_pi) = covariance_traces(&rect, &model, &cfg).unwrap();
        let rect_secs = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let opt = optimize(&model, &problem, &cfg, &zero).unwrap();
        let opt_secs = t0.elapsed().as_secs_f64();

        NemsShared {
            model,
            grid,
            problem,
            cfg,
            zero,
            zero_var,
            fwd_ss_var,
            rect,
            rect_sigma,
            rect_pi,
            rect_secs,
            opt,
            opt_secs,
        }
    })
}

fn report(id: u32, ok: bool, detail: &str) {
    println!(
        "[criterion {id:02}] {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

#[test]
fn criterion_01_scalar_steady_state_fixed_point() {
    let t0 = Instant::now();
    let m = SystemMatrices {
        a: dmatrix![-1.0],
        c: dmatrix![1.0],
        q: dmatrix![1.0],
        n: DMatrix::zeros(1, 1),
        eta: dvector![1.0],
    };
    let opts = SteadyStateOpts::new(1e-3, 200.0);
    let ss = steady_state(Direction::Forward, &m, &DMatrix::identity(1, 1), &opts).unwrap();
    let sigma = ss[(0, 0)];
    let expected = 2f64.sqrt() - 1.0;
    let rhs = rhs_forward(&ss, &m).unwrap().norm();
    let secs = t0.elapsed().as_secs_f64();

    let ok = (sigma - expected).abs() < 1e-8 && rhs < 1e-8 && secs < 1.0;
    report(
        1,
        ok,
        &format!(
            "scalar fixed point {sigma:.12} vs −1+√2 (|Δ| = {:.2e}), residual {rhs:.2e}, {secs:.3} s",
            (sigma - expected).abs()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_02_rk4_order_on_closed_form_decay() {
    let t0 = Instant::now();
    // No measurement: dσ/dt = 2aσ + q relaxes to −q/(2a) along an exact
    // exponential, so the integrator error is measurable directly.
    let m = SystemMatrices {
        a: dmatrix![-1.0],
        c: DMatrix::zeros(0, 1),
        q: dmatrix![1.0],
        n: DMatrix::zeros(0, 1),
        eta: dvector![],
    };
    let sigma0 = 2.0;
    let analytic = |t: f64| 0.5 + (sigma0 - 0.5) * (-2.0 * t).exp();
    let init = dmatrix![sigma0];
    let error = |steps: usize| -> f64 {
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let traj = integrate(Direction::Forward, &init, &m, &grid).unwrap();
        (traj.last()[(0, 0)] - analytic(1.0)).abs()
    };
    let coarse = error(8);
    let fine = error(16);
    let factor = coarse / fine;
    let secs = t0.elapsed().as_secs_f64();

    // `fine` must sit well above round-off for the ratio to measure order.
    let ok = factor >= 12.0 && fine > 1e-13 && secs < 1.0;
    report(
        2,
        ok,
        &format!(
            "halving dt shrinks the error by {factor:.1}x (≥ 12 required; errors {coarse:.2e} → {fine:.2e}), {secs:.3} s"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_particle_trajectory_stays_physical() {
    let t0 = Instant::now();
    let model = particle_model(&ParticleParams::reference()).unwrap();
    let period = model.reference_period();
    let grid = TimeGrid::new(0.0, PERIODS * period, K_CTRL).unwrap();
    let zero = ControlProtocol::zero(grid, model.bounds()).unwrap();
    let (sigma, _) = covariance_traces(&zero, &model, &OcpConfig::default()).unwrap();

    let mut checked = 0usize;
    let mut all_ok = true;
    for cov in sigma.values() {
        let tol = 1e-9 * cov.trace();
        if !check_uncertainty(cov, tol).unwrap() {
            all_ok = false;
            break;
        }
        checked += 1;
    }
    let secs = t0.elapsed().as_secs_f64();

    let ok = all_ok && secs < 5.0;
    report(
        3,
        ok,
        &format!(
            "{checked} covariances over 50 trap periods satisfy the uncertainty relation (tol 1e−9·trace), {secs:.3} s"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_04_square_wave_drive_settles_into_a_heated_limit_cycle() {
    let shared = nems();
    let period = shared.model.reference_period();
    let t_p = shared.problem.t_p();
    let fine = shared.rect_sigma.grid();
    let n = shared.problem.direction();

    // The cycle is best settled near the kick time: the forward trace has
    // relaxed for 25 periods and the backward trace for another 25.
    let lo = fine.nearest_node(t_p - 2.0 * period);
    let hi = fine.nearest_node(t_p + 2.0 * period);
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    for i in lo..=hi {
        let sum = shared.rect_sigma.at_node(i) + shared.rect_pi.at_node(i);
        let var = projected_variance(&sum, n).unwrap();
        let ratio = (var / shared.fwd_ss_var).sqrt();
        min_ratio = min_ratio.min(ratio);
        max_ratio = max_ratio.max(ratio);
    }

    let ok = min_ratio >= 1.8 && max_ratio <= 2.7 && shared.rect_secs < 30.0;
    report(
        4,
        ok,
        &format!(
            "2Ω₀ square wave at depth 0.4: settled √(nᵀ(Σ+Π)n) cycle spans [{min_ratio:.3}, {max_ratio:.3}]× \
             the steady-state uncertainty √(nᵀΣ_ss n) (required within [1.8, 2.7]), traces in {:.3} s",
            shared.rect_secs
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_optimized_drive_halves_the_projected_variance() {
    let shared = nems();
    let res = &shared.opt;
    let sqrt_ratio = res.ratio.sqrt();
    let stretch_met = (0.34..=0.64).contains(&sqrt_ratio);

    let ok = res.ratio <= 0.5 && shared.opt_secs < 600.0;
    report(
        5,
        ok,
        &format!(
            "optimized resonator protocol: variance ratio {:.4} (hard gate ≤ 0.5), √-scale ratio {sqrt_ratio:.4}, \
             stretch target 0.49±0.15 met: {stretch_met}, optimization in {:.1} s",
            res.ratio, shared.opt_secs
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_06_optimized_particle_drive_halves_the_projected_variance() {
    let t0 = Instant::now();
    let model = particle_model(&ParticleParams::reference()).unwrap();
    let period = model.reference_period();
    let grid = TimeGrid::new(0.0, PERIODS * period, K_CTRL).unwrap();
    let t_p = grid.node(K_CTRL / 2);
    let problem = ImpulseProblem::momentum_kick(t_p, grid.t1(), 5.0).unwrap();
    let zero = ControlProtocol::zero(grid, model.bounds()).unwrap();
    let base_cfg = OcpConfig::default();
    let gamma = default_gamma_reg(&model, &problem, &grid, &base_cfg).unwrap();
    let cfg = OcpConfig {
        gamma_reg: gamma,
        ..base_cfg
    };
    let res = optimize(&model, &problem, &cfg, &zero).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let ok = res.ratio <= 0.5 && secs < 600.0;
    report(
        6,
        ok,
        &format!(
            "optimized particle protocol: variance ratio {:.4} (hard gate ≤ 0.5), {secs:.1} s",
            res.ratio
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_ensemble_statistics_match_the_covariance_prediction() {
    let shared = nems();
    const TRIALS: usize = 1000;
    const STRIDE: usize = 320;

    let t0 = Instant::now();
    let sim_zero = Simulator::new(&shared.model, &shared.zero, &shared.problem, STRIDE).unwrap();
    let stats_zero = sim_zero.run_ensemble(TRIALS, 20250817).unwrap();
    let sim_opt =
        Simulator::new(&shared.model, &shared.opt.protocol, &shared.problem, STRIDE).unwrap();
    let stats_opt = sim_opt.run_ensemble(TRIALS, 20250818).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let band = 3.0 * (2.0 / TRIALS as f64).sqrt();
    let dev_zero = stats_zero.var_error / stats_zero.theoretical_var - 1.0;
    let dev_opt = stats_opt.var_error / stats_opt.theoretical_var - 1.0;
    let theo_ratio = stats_opt.theoretical_var / stats_zero.theoretical_var;
    let emp_ratio = stats_opt.var_error / stats_zero.var_error;
    let dev_ratio = emp_ratio / theo_ratio - 1.0;

    let ok = dev_zero.abs() <= band && dev_opt.abs() <= band && dev_ratio.abs() <= 0.15
        && secs < 300.0;
    report(
        7,
        ok,
        &format!(
            "1000-trial ensembles: sample/theory deviation {:+.1}% (zero drive) and {:+.1}% (optimized) \
             within ±{:.1}%; empirical variance ratio {emp_ratio:.4} vs theoretical {theo_ratio:.4} \
             ({:+.1}%, within ±15%), {secs:.1} s",
            100.0 * dev_zero,
            100.0 * dev_opt,
            100.0 * band,
            100.0 * dev_ratio
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_square_wave_hurts_while_the_optimized_drive_helps() {
    let shared = nems();
    let t0 = Instant::now();
    let jp = shared
        .rect_sigma
        .grid()
        .nearest_node(shared.problem.t_p());
    let sum = shared.rect_sigma.at_node(jp) + shared.rect_pi.at_node(jp);
    let rect_var = projected_variance(&sum, shared.problem.direction()).unwrap();
    let opt_var = shared.opt.final_projected_variance;
    let secs = t0.elapsed().as_secs_f64();

    let ok = rect_var > shared.zero_var && opt_var < shared.zero_var && secs < 60.0;
    report(
        8,
        ok,
        &format!(
            "at the kick time: square-wave sum {:.4}× the undriven value (> 1 required), \
             optimized sum {:.4}× (< 1 required), {secs:.3} s",
            rect_var / shared.zero_var,
            opt_var / shared.zero_var
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_kick_time_covariances_split_cleanly_at_the_boundary() {
    let shared = nems();
    let t0 = Instant::now();
    let jc = K_CTRL / 2;
    let (sigma_base, pi_base) =
        covariances_at_kick(&shared.rect, &shared.model, &shared.problem, &shared.cfg).unwrap();

    let perturbed = |k: usize| -> (DMatrix<f64>, DMatrix<f64>) {
        let mut values = shared.rect.values().to_vec();
        values[k] = if (values[k] - 0.17).abs() < 1e-12 { -0.17 } else { 0.17 };
        let p = ControlProtocol::new(shared.grid, values, shared.model.bounds()).unwrap();
        covariances_at_kick(&p, &shared.model, &shared.problem, &shared.cfg).unwrap()
    };

    let mut sigma_ok = true;
    for k in [jc, (jc + K_CTRL) / 2, K_CTRL - 1] {
        let (sigma, _) = perturbed(k);
        sigma_ok &= sigma == sigma_base;
    }
    let mut pi_ok = true;
    for k in [0, jc / 2, jc - 1] {
        let (_, pi) = perturbed(k);
        pi_ok &= pi == pi_base;
    }
    let secs = t0.elapsed().as_secs_f64();

    let ok = sigma_ok && pi_ok && secs < 10.0;
    report(
        9,
        ok,
        &format!(
            "Σ(t_p) bit-identical under 3 post-kick control perturbations: {sigma_ok}; \
             Π(t_p) bit-identical under 3 pre-kick perturbations: {pi_ok}; {secs:.3} s"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_optimizer_agrees_with_an_exhaustive_scan() {
    let t0 = Instant::now();
    // Drift-free scalar model whose process noise softens with the control:
    // q(p) = 1/(1+p), unit measurement. Forward and backward flows coincide,
    // the cost of a constant protocol splits per control interval, and the
    // objective is symmetric and strictly convex in each interval, so the
    // true optimum is a constant protocol. That reduces the search to one
    // control value, which an exhaustive 1D scan settles by brute force.
    let model = ParametricModel::from_parts(
        |p: f64| SystemMatrices {
            a: dmatrix![0.0],
            c: dmatrix![1.0],
            q: dmatrix![1.0 / (1.0 + p)],
            n: DMatrix::zeros(1, 1),
            eta: dvector![1.0],
        },
        -0.4,
        0.4,
        1.0,
        1.0,
    )
    .unwrap();
    let grid = TimeGrid::new(0.0, 4.0, 2).unwrap();
    let problem = ImpulseProblem::new(2.0, 4.0, dvector![1.0], 0.0).unwrap();
    let cfg = OcpConfig {
        gamma_reg: 0.2,
        control_stride: 200,
        ..OcpConfig::default()
    };

    const POINTS: usize = 10_000;
    let (lo, hi) = model.bounds();
    let mut best_v = f64::NAN;
    let mut best_cost = f64::INFINITY;
    for i in 0..POINTS {
        let v = lo + (hi - lo) * i as f64 / (POINTS - 1) as f64;
        let p = ControlProtocol::new(grid, vec![v; 2], model.bounds()).unwrap();
        let (cost, _) = evaluate_cost(&p, &model, &problem, &cfg).unwrap();
        if cost < best_cost {
            best_cost = cost;
            best_v = v;
        }
    }

    let zero = ControlProtocol::zero(grid, model.bounds()).unwrap();
    let res = optimize(&model, &problem, &cfg, &zero).unwrap();
    let control_dev = res
        .protocol
        .values()
        .iter()
        .map(|v| (v - best_v).abs())
        .fold(0.0f64, f64::max);
    let cost_dev = (res.final_cost - best_cost).abs() / best_cost;
    let secs = t0.elapsed().as_secs_f64();

    let ok = control_dev <= 1e-3 && cost_dev <= 1e-6 && secs < 60.0;
    report(
        10,
        ok,
        &format!(
            "10000-point scan optimum p = {best_v:.6}; optimizer within {control_dev:.2e} in control \
             and {cost_dev:.2e} in relative cost, {secs:.1} s"
        ),
    );
    assert!(ok);
}

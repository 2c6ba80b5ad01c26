//! The four subcommands. Each builds what it needs from the run context,
//! writes CSV tables first and plots last (plot failures are logged, never
//! fatal), and returns the process exit code.

use std::path::Path;

use nalgebra::DMatrix;

use kickopt::gaussian::uncertainty_margin;
use kickopt::impulse::projected_variance;
use kickopt::montecarlo::{EnsembleStats, Simulator};
use kickopt::ocp::{
    covariance_traces, covariances_at_kick, optimize, rectangular_protocol,
    rectangular_protocol_adjusted, ControlProtocol, OcpResult,
};
use kickopt::riccati::{steady_state, CovarianceTrajectory, Direction, SteadyStateOpts};

use crate::config::{RunContext, SystemChoice};
use crate::output::{num, write_csv};
use crate::plot::{histogram, line_chart, Series};
use crate::{CliError, EXIT_STALLED};

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn ensure_out_dir(ctx: &RunContext) -> Result<(), CliError> {
    std::fs::create_dir_all(&ctx.out_dir).map_err(|e| {
        CliError::Validation(format!("cannot create {}: {e}", ctx.out_dir.display()))
    })
}

fn emit_plot(name: &str, result: std::io::Result<()>) {
    if let Err(e) = result {
        log::warn!("plot {name} failed (data tables are unaffected): {e}");
    }
}

/// Lower-triangle labels like `sigma_00,sigma_01,sigma_11` for a symmetric
/// matrix of the given dimension.
fn symmetric_labels(prefix: &str, dim: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            names.push(format!("{prefix}_{i}{j}"));
        }
    }
    names
}

fn symmetric_entries(m: &DMatrix<f64>) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            out.push(num(m[(i, j)]));
        }
    }
    out
}

// ─── steady-state ────────────────────────────────────────────────────────────

/// Undriven boundary covariances: the filtering steady state, the
/// retrodiction steady state, their projected sum along the kick direction,
/// and the uncertainty-principle margin of each.
pub fn cmd_steady_state(ctx: &RunContext) -> Result<i32, CliError> {
    ensure_out_dir(ctx)?;
    let mats = ctx.model.matrices(0.0)?;
    let dt = ctx.model.reference_period() / ctx.steps_per_period as f64;
    let opts = SteadyStateOpts::new(
        dt,
        200.0 * ctx.model.relaxation_time().max(ctx.model.reference_period()),
    );
    let init = DMatrix::identity(mats.dim(), mats.dim());
    let sigma = steady_state(Direction::Forward, &mats, &init, &opts)?;
    let pi = steady_state(Direction::Backward, &mats, &init, &opts)?;
    let n = ctx.direction();
    let sum = projected_variance(&(&sigma + &pi), n)?;
    let margin_sigma = uncertainty_margin(&sigma)?;
    let margin_pi = uncertainty_margin(&pi)?;

    let mut header: Vec<String> = Vec::new();
    let mut row: Vec<String> = Vec::new();
    header.extend(symmetric_labels("sigma", sigma.nrows()));
    row.extend(symmetric_entries(&sigma));
    header.extend(symmetric_labels("pi", pi.nrows()));
    row.extend(symmetric_entries(&pi));
    header.push("projected_sum".into());
    row.push(num(sum));
    header.push("sigma_margin".into());
    row.push(num(margin_sigma));
    header.push("pi_margin".into());
    row.push(num(margin_pi));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&ctx.out_dir, "steady_state.csv", &ctx.meta, &header_refs, &[row])?;

    println!("system: {}", ctx.choice.label());
    println!("filtering steady state (zero-point units):");
    print_matrix(&sigma);
    println!("retrodiction steady state:");
    print_matrix(&pi);
    println!("projected variance of the sum along the kick direction: {sum:.6e}");
    println!("uncertainty margins: filtering {margin_sigma:.6e}, retrodiction {margin_pi:.6e}");
    println!("wrote {}", ctx.out_dir.join("steady_state.csv").display());
    Ok(0)
}

fn print_matrix(m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:>14.6e}", m[(i, j)])).collect();
        println!("  [{}]", row.join(", "));
    }
}

// ─── optimize ────────────────────────────────────────────────────────────────

struct TraceTable {
    rows: Vec<Vec<String>>,
    /// (t, √(nᵀΣn)), (t, √(nᵀΠn)), (t, √(nᵀ(Σ+Π)n)) per fine node.
    fwd: Vec<(f64, f64)>,
    bwd: Vec<(f64, f64)>,
    sum: Vec<(f64, f64)>,
}

fn trace_table(
    ctx: &RunContext,
    fwd: &CovarianceTrajectory,
    bwd: &CovarianceTrajectory,
) -> Result<TraceTable, CliError> {
    let n = ctx.direction();
    let grid = fwd.grid();
    let mut rows = Vec::with_capacity(grid.steps() + 1);
    let mut f_pts = Vec::with_capacity(grid.steps() + 1);
    let mut b_pts = Vec::with_capacity(grid.steps() + 1);
    let mut s_pts = Vec::with_capacity(grid.steps() + 1);
    for k in 0..=grid.steps() {
        let t = grid.node(k);
        let vf = projected_variance(fwd.at_node(k), n)?;
        let vb = projected_variance(bwd.at_node(k), n)?;
        let (sf, sb, ss) = (vf.sqrt(), vb.sqrt(), (vf + vb).sqrt());
        rows.push(vec![num(t), num(sf), num(sb), num(ss)]);
        f_pts.push((t, sf));
        b_pts.push((t, sb));
        s_pts.push((t, ss));
    }
    Ok(TraceTable {
        rows,
        fwd: f_pts,
        bwd: b_pts,
        sum: s_pts,
    })
}

const TRACE_HEADER: [&str; 4] = ["t", "sqrt_forward", "sqrt_backward", "sqrt_sum"];

fn write_protocol_csv(
    ctx: &RunContext,
    name: &str,
    protocol: &ControlProtocol,
) -> Result<(), CliError> {
    let grid = protocol.grid();
    let rows: Vec<Vec<String>> = protocol
        .values()
        .iter()
        .enumerate()
        .map(|(k, &p)| vec![num(grid.node(k)), num(p)])
        .collect();
    write_csv(&ctx.out_dir, name, &ctx.meta, &["t", "p"], &rows)?;
    Ok(())
}

fn protocol_points(protocol: &ControlProtocol) -> Vec<(f64, f64)> {
    let grid = protocol.grid();
    let mut pts: Vec<(f64, f64)> = protocol
        .values()
        .iter()
        .enumerate()
        .map(|(k, &p)| (grid.node(k), p))
        .collect();
    if let Some(&last) = protocol.values().last() {
        pts.push((grid.t1(), last));
    }
    pts
}

fn summary_fields(res: &OcpResult, gamma_reg: f64) -> (Vec<&'static str>, Vec<String>) {
    (
        vec![
            "baseline_variance",
            "optimized_variance",
            "ratio",
            "sqrt_ratio",
            "iterations",
            "stalled",
            "gamma_reg",
        ],
        vec![
            num(res.steady_state_projected_variance),
            num(res.final_projected_variance),
            num(res.ratio),
            num(res.ratio.sqrt()),
            (res.cost_history.len() - 1).to_string(),
            (res.stalled as u8).to_string(),
            num(gamma_reg),
        ],
    )
}

fn print_optimize_report(ctx: &RunContext, res: &OcpResult) {
    println!("system: {}", ctx.choice.label());
    println!(
        "baseline projected variance (undriven): {:.6e}",
        res.steady_state_projected_variance
    );
    println!(
        "optimized projected variance:           {:.6e}",
        res.final_projected_variance
    );
    println!(
        "variance ratio {:.4} (uncertainty ratio {:.4}) after {} iterations",
        res.ratio,
        res.ratio.sqrt(),
        res.cost_history.len() - 1
    );
    if res.stalled {
        eprintln!("warning: optimizer made no progress from the initial protocol");
    }
}

/// Projected-gradient drive design for the configured kick; writes the
/// protocol, the uncertainty time traces under it, and a one-row summary.
pub fn cmd_optimize(ctx: &RunContext) -> Result<i32, CliError> {
    ensure_out_dir(ctx)?;
    let cfg = ctx.ocp_config()?;
    let zero = ControlProtocol::zero(ctx.grid, ctx.model.bounds())?;
    let res = optimize(&ctx.model, &ctx.problem, &cfg, &zero)?;

    write_protocol_csv(ctx, "protocol.csv", &res.protocol)?;
    let (fwd, bwd) = covariance_traces(&res.protocol, &ctx.model, &cfg)?;
    let trace = trace_table(ctx, &fwd, &bwd)?;
    write_csv(
        &ctx.out_dir,
        "uncertainty_trace.csv",
        &ctx.meta,
        &TRACE_HEADER,
        &trace.rows,
    )?;
    let (header, row) = summary_fields(&res, cfg.gamma_reg);
    write_csv(&ctx.out_dir, "summary.csv", &ctx.meta, &header, &[row])?;

    if ctx.emit_plots {
        emit_plot(
            "protocol.svg",
            line_chart(
                &ctx.out_dir.join("protocol.svg"),
                "Optimized drive protocol",
                "t [s]",
                "p",
                &[Series {
                    label: "p(t)",
                    color: COLORS[0],
                    points: protocol_points(&res.protocol),
                    steps: true,
                }],
            ),
        );
        emit_plot(
            "uncertainty_trace.svg",
            line_chart(
                &ctx.out_dir.join("uncertainty_trace.svg"),
                "Impulse uncertainty under the optimized drive",
                "t [s]",
                "projected uncertainty",
                &[
                    Series {
                        label: "filtering",
                        color: COLORS[0],
                        points: trace.fwd.clone(),
                        steps: false,
                    },
                    Series {
                        label: "retrodiction",
                        color: COLORS[1],
                        points: trace.bwd.clone(),
                        steps: false,
                    },
                    Series {
                        label: "combined",
                        color: COLORS[2],
                        points: trace.sum.clone(),
                        steps: false,
                    },
                ],
            ),
        );
    }

    print_optimize_report(ctx, &res);
    println!("wrote protocol.csv, uncertainty_trace.csv, summary.csv in {}", ctx.out_dir.display());
    Ok(if res.stalled { EXIT_STALLED } else { 0 })
}

// ─── compare ─────────────────────────────────────────────────────────────────

/// Square-wave reference drive at twice the mechanical frequency, full depth,
/// spanning the whole horizon. The particle flips on the accumulated phase of
/// its power-dependent frequency instead of a fixed clock.
fn reference_square_wave(ctx: &RunContext) -> Result<ControlProtocol, CliError> {
    let bounds = ctx.model.bounds();
    let (lo, hi) = bounds;
    let depth = hi.min(-lo);
    let window = (ctx.grid.t0(), ctx.grid.t1());
    let protocol = match &ctx.choice {
        SystemChoice::Nems(p) => {
            rectangular_protocol(&ctx.grid, 2.0 * p.omega0, depth, 0.0, window, bounds)?
        }
        SystemChoice::Particle(p) => {
            let omega0 = p.omega0;
            rectangular_protocol_adjusted(
                &ctx.grid,
                move |v| omega0 * (1.0 + v).sqrt(),
                depth,
                0.0,
                window,
                bounds,
            )?
        }
    };
    Ok(protocol)
}

/// Optimized drive against the square-wave reference: both protocols, both
/// uncertainty traces with their filtering/retrodiction decomposition, and a
/// summary quantifying how each changes the kick-time variance.
pub fn cmd_compare(ctx: &RunContext) -> Result<i32, CliError> {
    ensure_out_dir(ctx)?;
    let cfg = ctx.ocp_config()?;
    let zero = ControlProtocol::zero(ctx.grid, ctx.model.bounds())?;
    let res = optimize(&ctx.model, &ctx.problem, &cfg, &zero)?;
    let rect = reference_square_wave(ctx)?;
    let (rect_sigma, rect_pi) = covariances_at_kick(&rect, &ctx.model, &ctx.problem, &cfg)?;
    let rect_var = projected_variance(&(rect_sigma + rect_pi), ctx.direction())?;

    write_protocol_csv(ctx, "protocol.csv", &res.protocol)?;
    write_protocol_csv(ctx, "rect_protocol.csv", &rect)?;
    let (fwd_o, bwd_o) = covariance_traces(&res.protocol, &ctx.model, &cfg)?;
    let opt_trace = trace_table(ctx, &fwd_o, &bwd_o)?;
    write_csv(
        &ctx.out_dir,
        "uncertainty_trace.csv",
        &ctx.meta,
        &TRACE_HEADER,
        &opt_trace.rows,
    )?;
    let (fwd_r, bwd_r) = covariance_traces(&rect, &ctx.model, &cfg)?;
    let rect_trace = trace_table(ctx, &fwd_r, &bwd_r)?;
    write_csv(
        &ctx.out_dir,
        "rect_trace.csv",
        &ctx.meta,
        &TRACE_HEADER,
        &rect_trace.rows,
    )?;

    let (mut header, mut row) = summary_fields(&res, cfg.gamma_reg);
    header.extend(["rect_variance", "rect_ratio"]);
    row.push(num(rect_var));
    row.push(num(rect_var / res.steady_state_projected_variance));
    write_csv(&ctx.out_dir, "summary.csv", &ctx.meta, &header, &[row])?;

    if ctx.emit_plots {
        emit_plot(
            "comparison.svg",
            line_chart(
                &ctx.out_dir.join("comparison.svg"),
                "Optimized drive vs square-wave reference",
                "t [s]",
                "combined projected uncertainty",
                &[
                    Series {
                        label: "optimized",
                        color: COLORS[0],
                        points: opt_trace.sum.clone(),
                        steps: false,
                    },
                    Series {
                        label: "square wave",
                        color: COLORS[1],
                        points: rect_trace.sum.clone(),
                        steps: false,
                    },
                ],
            ),
        );
        emit_plot(
            "decomposition.svg",
            line_chart(
                &ctx.out_dir.join("decomposition.svg"),
                "Filtering and retrodiction decomposition",
                "t [s]",
                "projected uncertainty",
                &[
                    Series {
                        label: "optimized filtering",
                        color: COLORS[0],
                        points: opt_trace.fwd.clone(),
                        steps: false,
                    },
                    Series {
                        label: "optimized retrodiction",
                        color: COLORS[2],
                        points: opt_trace.bwd.clone(),
                        steps: false,
                    },
                    Series {
                        label: "square filtering",
                        color: COLORS[1],
                        points: rect_trace.fwd.clone(),
                        steps: false,
                    },
                    Series {
                        label: "square retrodiction",
                        color: COLORS[3],
                        points: rect_trace.bwd.clone(),
                        steps: false,
                    },
                ],
            ),
        );
    }

    print_optimize_report(ctx, &res);
    println!(
        "square-wave reference: kick-time variance {:.6e} ({:.4}x the undriven value)",
        rect_var,
        rect_var / res.steady_state_projected_variance
    );
    println!(
        "wrote protocol.csv, rect_protocol.csv, uncertainty_trace.csv, rect_trace.csv, summary.csv in {}",
        ctx.out_dir.display()
    );
    Ok(if res.stalled { EXIT_STALLED } else { 0 })
}

// ─── simulate ────────────────────────────────────────────────────────────────

/// Reads a two-column (t, p) protocol CSV and checks it lines up with the
/// configured control grid node by node.
fn load_protocol_csv(path: &Path, ctx: &RunContext) -> Result<ControlProtocol, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read protocol {}: {e}", path.display()))
    })?;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(CliError::Validation(format!(
                "protocol line {}: expected exactly two columns",
                line_no + 1
            )));
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(t), Ok(p)) => pairs.push((t, p)),
            // A single non-numeric line is the header.
            _ if pairs.is_empty() && (a.eq_ignore_ascii_case("t") || b.eq_ignore_ascii_case("p")) => {}
            _ => {
                return Err(CliError::Validation(format!(
                    "protocol line {}: cannot parse `{line}` as numbers",
                    line_no + 1
                )))
            }
        }
    }
    if pairs.len() != ctx.grid.steps() {
        return Err(CliError::Validation(format!(
            "protocol does not align with the control grid: {} rows for {} control intervals",
            pairs.len(),
            ctx.grid.steps()
        )));
    }
    let tol = 1e-6 * ctx.grid.dt();
    for (k, &(t, _)) in pairs.iter().enumerate() {
        let expect = ctx.grid.node(k);
        if (t - expect).abs() > tol {
            return Err(CliError::Validation(format!(
                "protocol does not align with the control grid: row {} has t = {t}, expected {expect}",
                k + 1
            )));
        }
    }
    let values = pairs.into_iter().map(|(_, p)| p).collect();
    Ok(ControlProtocol::new(ctx.grid, values, ctx.model.bounds())?)
}

/// Monte Carlo validation: samples measurement records under the configured
/// (or supplied) drive, runs the filtering/retrodiction estimator on each,
/// and compares the empirical estimator variance with the covariance
/// prediction.
pub fn cmd_simulate(ctx: &RunContext, protocol_path: Option<&Path>) -> Result<i32, CliError> {
    ensure_out_dir(ctx)?;
    let protocol = match protocol_path {
        Some(p) => load_protocol_csv(p, ctx)?,
        None => ControlProtocol::zero(ctx.grid, ctx.model.bounds())?,
    };
    if ctx.trials < 2 {
        return Err(CliError::Validation(format!(
            "[simulation] trials must be at least 2, got {}",
            ctx.trials
        )));
    }
    if ctx.trials < 100 {
        log::warn!(
            "fewer than 100 trials ({}): the variance comparison will be statistically weak",
            ctx.trials
        );
    }
    let sim = Simulator::new(&ctx.model, &protocol, &ctx.problem, ctx.mc_stride)?;
    let results = sim.run_trials(ctx.trials, ctx.base_seed)?;
    let stats = EnsembleStats::from_trials(&results, ctx.problem.alpha(), sim.theoretical_var())?;

    let rows: Vec<Vec<String>> = results
        .iter()
        .enumerate()
        .map(|(k, r)| {
            vec![
                k.to_string(),
                ctx.base_seed.wrapping_add(k as u64).to_string(),
                num(r.alpha_hat),
                num(r.alpha_hat - ctx.problem.alpha()),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir,
        "trials.csv",
        &ctx.meta,
        &["trial", "seed", "alpha_hat", "error"],
        &rows,
    )?;
    write_csv(
        &ctx.out_dir,
        "ensemble.csv",
        &ctx.meta,
        &["trials", "alpha", "mean_error", "var_error", "theoretical_var", "z_score"],
        &[vec![
            stats.trials.to_string(),
            num(ctx.problem.alpha()),
            num(stats.mean_error),
            num(stats.var_error),
            num(stats.theoretical_var),
            num(stats.z_score),
        ]],
    )?;

    if ctx.emit_plots {
        let errors: Vec<f64> = results.iter().map(|r| r.alpha_hat - ctx.problem.alpha()).collect();
        let bins = (ctx.trials / 20).clamp(10, 60);
        emit_plot(
            "errors.svg",
            histogram(
                &ctx.out_dir.join("errors.svg"),
                "Impulse estimation errors",
                "alpha_hat - alpha",
                &errors,
                bins,
            ),
        );
    }

    println!("system: {}", ctx.choice.label());
    println!(
        "{} trials, base seed {}, {} fine steps per control interval",
        ctx.trials, ctx.base_seed, ctx.mc_stride
    );
    println!(
        "empirical estimator variance {:.6e} vs predicted {:.6e} (z = {:+.2})",
        stats.var_error, stats.theoretical_var, stats.z_score
    );
    println!("wrote trials.csv, ensemble.csv in {}", ctx.out_dir.display());
    Ok(0)
}

//! TOML run configuration and its resolution into library objects.
//!
//! One file describes the physical system, the time grid, the optimizer, the
//! simulation batch, and the output location; every subcommand draws from the
//! same validated source. Unknown keys are rejected everywhere so a typo
//! fails loudly instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Deserialize;

use kickopt::impulse::ImpulseProblem;
use kickopt::ocp::{default_gamma_reg, OcpConfig};
use kickopt::riccati::TimeGrid;
use kickopt::systems::{
    nems_model, particle_model, NemsParams, ParametricModel, ParticleParams,
};

use crate::output::CsvMeta;
use crate::CliError;

/// Environment variable consulted for the output directory when `--out` is
/// not given. The config file's `[output].directory` is the fallback.
pub const OUT_DIR_ENV: &str = "KICKOPT_OUT_DIR";

/// Stochastic-trajectory resolution target: Euler–Maruyama steps per
/// mechanical period used by `simulate`, rounded to a whole number of fine
/// steps per control interval.
const MC_STEPS_PER_PERIOD: usize = 6400;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub ocp: OcpSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Nems,
    Particle,
}

/// `[system]` table. Parameter keys are optional and fall back to the
/// catalog's reference values; keys belonging to the other system kind are
/// rejected rather than ignored.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub kind: SystemKind,
    pub omega0: Option<f64>,
    pub gamma: Option<f64>,
    pub mass: Option<f64>,
    pub temperature: Option<f64>,
    pub s_f: Option<f64>,
    pub s_m: Option<f64>,
    pub kappa0: Option<f64>,
    pub eta_hom: Option<f64>,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
}

/// Fully resolved system parameters, carried alongside the model because the
/// square-wave reference drive needs the raw frequency.
#[derive(Debug, Clone, Copy)]
pub enum SystemChoice {
    Nems(NemsParams),
    Particle(ParticleParams),
}

impl SystemChoice {
    pub fn label(&self) -> &'static str {
        match self {
            SystemChoice::Nems(_) => "nems",
            SystemChoice::Particle(_) => "particle",
        }
    }
}

fn reject_key(value: Option<f64>, key: &str, kind: &str) -> Result<(), CliError> {
    if value.is_some() {
        return Err(CliError::Validation(format!(
            "[system] key `{key}` does not apply to kind = \"{kind}\""
        )));
    }
    Ok(())
}

impl SystemSection {
    pub fn resolve(&self) -> Result<SystemChoice, CliError> {
        match self.kind {
            SystemKind::Nems => {
                reject_key(self.kappa0, "kappa0", "nems")?;
                reject_key(self.eta_hom, "eta_hom", "nems")?;
                let mut p = NemsParams::reference();
                set(&mut p.omega0, self.omega0);
                set(&mut p.gamma, self.gamma);
                set(&mut p.mass, self.mass);
                set(&mut p.temperature, self.temperature);
                set(&mut p.s_f, self.s_f);
                set(&mut p.s_m, self.s_m);
                set(&mut p.p_min, self.p_min);
                set(&mut p.p_max, self.p_max);
                Ok(SystemChoice::Nems(p))
            }
            SystemKind::Particle => {
                reject_key(self.mass, "mass", "particle")?;
                reject_key(self.temperature, "temperature", "particle")?;
                reject_key(self.s_f, "s_f", "particle")?;
                reject_key(self.s_m, "s_m", "particle")?;
                let mut p = ParticleParams::reference();
                set(&mut p.omega0, self.omega0);
                set(&mut p.gamma, self.gamma);
                set(&mut p.kappa0, self.kappa0);
                set(&mut p.eta_hom, self.eta_hom);
                set(&mut p.p_min, self.p_min);
                set(&mut p.p_max, self.p_max);
                Ok(SystemChoice::Particle(p))
            }
        }
    }
}

fn set(slot: &mut f64, value: Option<f64>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// `[grid]` table. Durations are in mechanical periods of the undriven
/// system; `steps_per_period` counts integrator steps and `control_stride`
/// groups them into piecewise-constant control intervals.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub periods_before_tp: Option<f64>,
    pub periods_after_tp: Option<f64>,
    pub steps_per_period: Option<usize>,
    pub control_stride: Option<usize>,
}

/// Control grid plus the kick's position on it.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedGrid {
    pub grid: TimeGrid,
    /// Control-grid node index of the kick time.
    pub kick_node: usize,
    pub t_p: f64,
    pub steps_per_period: usize,
    pub control_stride: usize,
}

/// Closest integer if within a relative hair, else an error naming `what`.
fn whole(value: f64, what: &str) -> Result<usize, CliError> {
    let rounded = value.round();
    if (value - rounded).abs() > 1e-9 * value.abs().max(1.0) || rounded < 0.0 {
        return Err(CliError::Validation(format!(
            "{what} must come out to a whole number of steps, got {value}"
        )));
    }
    Ok(rounded as usize)
}

impl GridSection {
    pub fn resolve(&self, period: f64) -> Result<ResolvedGrid, CliError> {
        let before = self.periods_before_tp.unwrap_or(25.0);
        let after = self.periods_after_tp.unwrap_or(25.0);
        let spp = self.steps_per_period.unwrap_or(200);
        let stride = self.control_stride.unwrap_or(10);
        if !(before > 0.0) || !(after > 0.0) || !before.is_finite() || !after.is_finite() {
            return Err(CliError::Validation(format!(
                "[grid] periods before/after the kick must be positive, got {before} and {after}"
            )));
        }
        if spp == 0 || stride == 0 {
            return Err(CliError::Validation(
                "[grid] steps_per_period and control_stride must be at least 1".into(),
            ));
        }
        let fine_before = whole(before * spp as f64, "[grid] periods_before_tp * steps_per_period")?;
        let fine_after = whole(after * spp as f64, "[grid] periods_after_tp * steps_per_period")?;
        if fine_before % stride != 0 || fine_after % stride != 0 {
            return Err(CliError::Validation(format!(
                "[grid] control_stride {stride} must divide the {fine_before} steps before and \
                 {fine_after} steps after the kick"
            )));
        }
        let k_before = fine_before / stride;
        let k_after = fine_after / stride;
        if k_before == 0 || k_after == 0 {
            return Err(CliError::Validation(
                "[grid] the kick must be an interior control node".into(),
            ));
        }
        let horizon = (before + after) * period;
        let grid = TimeGrid::new(0.0, horizon, k_before + k_after)?;
        Ok(ResolvedGrid {
            grid,
            kick_node: k_before,
            t_p: grid.node(k_before),
            steps_per_period: spp,
            control_stride: stride,
        })
    }
}

/// `[ocp]` table. A missing `gamma_reg` means "derive the drive penalty from
/// the undriven variance", which needs the model and is resolved lazily.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSection {
    pub gamma_reg: Option<f64>,
    pub max_iters: Option<usize>,
    pub grad_tol: Option<f64>,
    pub fd_step: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub trials: Option<usize>,
    pub base_seed: Option<u64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<String>,
    pub emit_plots: Option<bool>,
}

/// Output directory precedence: `--out` flag, then [`OUT_DIR_ENV`], then the
/// config file, then `./out`.
pub fn resolve_out_dir(
    flag: Option<&Path>,
    env: Option<&str>,
    section: &OutputSection,
) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(e) = env {
        if !e.is_empty() {
            return PathBuf::from(e);
        }
    }
    PathBuf::from(section.directory.as_deref().unwrap_or("out"))
}

/// Everything a subcommand needs, resolved and validated once.
pub struct RunContext {
    pub choice: SystemChoice,
    pub model: ParametricModel,
    pub grid: TimeGrid,
    pub kick_node: usize,
    pub steps_per_period: usize,
    pub problem: ImpulseProblem,
    /// Solver knobs with `gamma_reg` left at zero; see [`RunContext::ocp_config`].
    ocp_base: OcpConfig,
    ocp_gamma: Option<f64>,
    pub trials: usize,
    pub base_seed: u64,
    pub emit_plots: bool,
    pub out_dir: PathBuf,
    pub meta: CsvMeta,
    /// Fine steps per control interval for stochastic trajectories.
    pub mc_stride: usize,
}

impl RunContext {
    /// Loads and cross-validates a configuration file. `out_flag` and
    /// `seed_flag` are the command-line overrides.
    pub fn prepare(
        config_path: &Path,
        out_flag: Option<&Path>,
        seed_flag: Option<u64>,
    ) -> Result<Self, CliError> {
        let bytes = std::fs::read(config_path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", config_path.display()))
        })?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::Validation("config file is not valid UTF-8".into()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config parse error: {e}")))?;
        Self::from_parsed(cfg, &bytes, out_flag, seed_flag)
    }

    fn from_parsed(
        cfg: RunConfig,
        raw: &[u8],
        out_flag: Option<&Path>,
        seed_flag: Option<u64>,
    ) -> Result<Self, CliError> {
        let choice = cfg.system.resolve()?;
        let model = match &choice {
            SystemChoice::Nems(p) => nems_model(p)?,
            SystemChoice::Particle(p) => particle_model(p)?,
        };
        let rg = cfg.grid.resolve(model.reference_period())?;
        let alpha = cfg.simulation.alpha.unwrap_or(5.0);
        if !alpha.is_finite() {
            return Err(CliError::Validation(format!(
                "[simulation] alpha must be finite, got {alpha}"
            )));
        }
        let problem = ImpulseProblem::momentum_kick(rg.t_p, rg.grid.t1(), alpha)?;
        let ocp_base = OcpConfig {
            gamma_reg: 0.0,
            max_iters: cfg.ocp.max_iters.unwrap_or(200),
            grad_tol: cfg.ocp.grad_tol.unwrap_or(1e-6),
            fd_step: cfg.ocp.fd_step.unwrap_or(1e-5),
            control_stride: rg.control_stride,
        };
        ocp_base.validate()?;
        if let Some(g) = cfg.ocp.gamma_reg {
            OcpConfig {
                gamma_reg: g,
                ..ocp_base
            }
            .validate()?;
        }
        let trials = cfg.simulation.trials.unwrap_or(1000);
        let base_seed = seed_flag.or(cfg.simulation.base_seed).unwrap_or(1);
        let env = std::env::var(OUT_DIR_ENV).ok();
        let out_dir = resolve_out_dir(out_flag, env.as_deref(), &cfg.output);
        let mc_stride = mc_stride(rg.steps_per_period, rg.control_stride);
        Ok(Self {
            choice,
            model,
            grid: rg.grid,
            kick_node: rg.kick_node,
            steps_per_period: rg.steps_per_period,
            problem,
            ocp_base,
            ocp_gamma: cfg.ocp.gamma_reg,
            trials,
            base_seed,
            emit_plots: cfg.output.emit_plots.unwrap_or(false),
            out_dir,
            meta: CsvMeta::from_config_bytes(raw),
            mc_stride,
        })
    }

    /// Solver configuration with the drive penalty filled in, deriving the
    /// default from the undriven variance when the config left it out.
    pub fn ocp_config(&self) -> Result<OcpConfig, CliError> {
        let mut cfg = self.ocp_base;
        cfg.gamma_reg = match self.ocp_gamma {
            Some(g) => g,
            None => default_gamma_reg(&self.model, &self.problem, &self.grid, &cfg)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Kick direction in phase space.
    pub fn direction(&self) -> &DVector<f64> {
        self.problem.direction()
    }
}

fn mc_stride(steps_per_period: usize, control_stride: usize) -> usize {
    // Fine steps per control interval so that one period gets about
    // MC_STEPS_PER_PERIOD of them; the control interval spans
    // control_stride / steps_per_period periods.
    let num = MC_STEPS_PER_PERIOD * control_stride;
    ((num + steps_per_period / 2) / steps_per_period).max(1)
}

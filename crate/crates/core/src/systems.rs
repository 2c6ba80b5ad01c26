//! Catalog of single-mode parametric models.
//!
//! Both systems are damped harmonic oscillators with position readout,
//! expressed in dimensionless (zero-point scaled) quadratures with time in
//! seconds. The drive parameter p is the fractional stiffness (NEMS) or laser
//! power (particle) modulation; each model maps p to the full set of
//! moment-equation matrices.

use nalgebra::{dmatrix, dvector, DMatrix};

use crate::error::{Error, Result};
use crate::gaussian::SystemMatrices;

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054571817e-34;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380649e-23;

/// Zero-point position spread √(ħ/(mΩ₀)), metres.
pub fn q_zpf(mass: f64, omega0: f64) -> f64 {
    (HBAR / (mass * omega0)).sqrt()
}

/// Zero-point momentum spread √(ħmΩ₀), kg·m/s.
pub fn p_zpf(mass: f64, omega0: f64) -> f64 {
    (HBAR * mass * omega0).sqrt()
}

/// White-noise intensity of the thermal Langevin force, N²/Hz.
///
/// This is the two-sided PSD 2 k_B Θ m Γ that, used directly as the
/// stochastic-forcing intensity alongside the −Γ damping term, reproduces
/// equipartition in the unconditional steady state. (The one-sided PSD
/// quoted by spectrum analyzers is twice this value.)
pub fn thermal_force_noise(mass: f64, gamma: f64, temperature: f64) -> f64 {
    2.0 * BOLTZMANN * temperature * mass * gamma
}

fn require_positive(value: f64, what: &str) -> Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "{what} must be positive and finite, got {value}"
        )));
    }
    Ok(())
}

fn check_bounds(p_min: f64, p_max: f64) -> Result<()> {
    if !p_min.is_finite() || !p_max.is_finite() || p_min >= p_max {
        return Err(Error::InvalidParameter(format!(
            "need p_min < p_max, got [{p_min}, {p_max}]"
        )));
    }
    if 1.0 + p_min <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "1 + p_min must stay positive, got p_min = {p_min}"
        )));
    }
    Ok(())
}

// ─── Parametric model ───────────────────────────────────────────────────────

/// A single-mode system as a map from the drive value p to its matrices.
pub struct ParametricModel {
    eval: Box<dyn Fn(f64) -> SystemMatrices + Send + Sync>,
    p_min: f64,
    p_max: f64,
    reference_period: f64,
    relaxation_time: f64,
}

impl ParametricModel {
    /// Wraps an evaluation closure. `reference_period` is the unmodulated
    /// mechanical period; `relaxation_time` bounds how long steady-state
    /// searches may need to run.
    pub fn from_parts(
        eval: impl Fn(f64) -> SystemMatrices + Send + Sync + 'static,
        p_min: f64,
        p_max: f64,
        reference_period: f64,
        relaxation_time: f64,
    ) -> Result<Self> {
        check_bounds(p_min, p_max)?;
        require_positive(reference_period, "reference period")?;
        require_positive(relaxation_time, "relaxation time")?;
        Ok(Self {
            eval: Box::new(eval),
            p_min,
            p_max,
            reference_period,
            relaxation_time,
        })
    }

    /// Model matrices at drive value `p`; errors outside the admissible box.
    pub fn matrices(&self, p: f64) -> Result<SystemMatrices> {
        if !p.is_finite() || p < self.p_min || p > self.p_max {
            return Err(Error::DriveOutOfBounds {
                value: p,
                min: self.p_min,
                max: self.p_max,
            });
        }
        Ok((self.eval)(p))
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.p_min, self.p_max)
    }

    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.p_min, self.p_max)
    }

    /// Unmodulated mechanical period 2π/Ω₀, seconds.
    pub fn reference_period(&self) -> f64 {
        self.reference_period
    }

    /// Slowest model timescale (1/Γ), seconds.
    pub fn relaxation_time(&self) -> f64 {
        self.relaxation_time
    }
}

// ─── NEMS resonator ─────────────────────────────────────────────────────────

/// Nanomechanical resonator with stiffness modulation and interferometric
/// position readout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NemsParams {
    /// Mechanical angular frequency, rad/s.
    pub omega0: f64,
    /// Damping rate, 1/s.
    pub gamma: f64,
    /// Effective mass, kg.
    pub mass: f64,
    /// Bath temperature, K.
    pub temperature: f64,
    /// Force-noise intensity, N²/Hz.
    pub s_f: f64,
    /// Position measurement-noise PSD, m²/Hz.
    pub s_m: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl NemsParams {
    /// Reference parameter set: a room-temperature 33.7 kHz cantilever with
    /// interferometric readout and a measured force-noise floor.
    pub fn reference() -> Self {
        Self {
            omega0: 2.0 * std::f64::consts::PI * 33.7e3,
            gamma: 2.07,
            mass: 2.8e-12,
            temperature: 295.0,
            s_f: 5.3e-31,
            s_m: 4.0e-28,
            p_min: -0.4,
            p_max: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive(self.omega0, "omega0")?;
        require_positive(self.gamma, "gamma")?;
        require_positive(self.mass, "mass")?;
        require_positive(self.temperature, "temperature")?;
        require_positive(self.s_f, "s_f")?;
        require_positive(self.s_m, "s_m")?;
        check_bounds(self.p_min, self.p_max)
    }
}

/// Stiffness-modulated resonator with instantaneous frequency Ω(t) = Ω₀(1+p):
/// A = [[0, Ω₀], [−Ω₀(1+p)², −Γ]], C = [q_zpf/√S_m, 0], Q = diag(0, S_f/p_zpf²),
/// unit detection efficiency, no measurement/process cross-correlation.
/// Quadratures stay scaled by the p = 0 zero-point units, so the restoring
/// entry carries the full Ω(t)²/Ω₀ while the momentum coupling stays Ω₀.
pub fn nems_model(params: &NemsParams) -> Result<ParametricModel> {
    params.validate()?;
    let thermal_quanta = BOLTZMANN * params.temperature / (HBAR * params.omega0);
    if thermal_quanta < 10.0 {
        log::warn!(
            "NEMS model outside the high-temperature regime (k_B·T/(ħΩ₀) = {thermal_quanta:.2}); \
             the classical force-noise treatment is questionable"
        );
    }
    let omega0 = params.omega0;
    let gamma = params.gamma;
    let c1 = q_zpf(params.mass, omega0) / params.s_m.sqrt();
    let q_pp = params.s_f / p_zpf(params.mass, omega0).powi(2);
    let eval = move |p: f64| SystemMatrices {
        a: dmatrix![0.0, omega0; -omega0 * (1.0 + p) * (1.0 + p), -gamma],
        c: DMatrix::from_row_slice(1, 2, &[c1, 0.0]),
        q: dmatrix![0.0, 0.0; 0.0, q_pp],
        n: DMatrix::zeros(1, 2),
        eta: dvector![1.0],
    };
    ParametricModel::from_parts(
        eval,
        params.p_min,
        params.p_max,
        2.0 * std::f64::consts::PI / omega0,
        1.0 / gamma,
    )
}

// ─── Levitated nanoparticle ─────────────────────────────────────────────────

/// Optically trapped nanoparticle with laser-power modulation and homodyne
/// position readout. Trap frequency scales with the square root of power;
/// measurement rate and back-action scale linearly with it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleParams {
    /// Mechanical angular frequency at p = 0, rad/s.
    pub omega0: f64,
    /// Residual damping rate, 1/s.
    pub gamma: f64,
    /// Measurement-rate constant at p = 0, 1/s.
    pub kappa0: f64,
    /// Homodyne detection efficiency in (0, 1].
    pub eta_hom: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl ParticleParams {
    /// Reference parameter set: a 104 kHz optical trap operated in the
    /// quantum-limited readout regime.
    pub fn reference() -> Self {
        Self {
            omega0: 2.0 * std::f64::consts::PI * 104.0e3,
            gamma: 0.64,
            kappa0: 41.0e3,
            eta_hom: 0.4,
            p_min: -0.4,
            p_max: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive(self.omega0, "omega0")?;
        require_positive(self.gamma, "gamma")?;
        require_positive(self.kappa0, "kappa0")?;
        if !(self.eta_hom > 0.0 && self.eta_hom <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eta_hom must lie in (0, 1], got {}",
                self.eta_hom
            )));
        }
        check_bounds(self.p_min, self.p_max)
    }
}

/// Power-modulated optical trap with trap frequency Ω(t) = Ω₀√(1+p):
/// A = [[0, Ω₀], [−Ω₀(1+p), −Γ]], C = [√(8κ₀(1+p)), 0], Q = diag(0, 2κ₀(1+p)),
/// homodyne efficiency η, no cross-correlation. The restoring entry carries
/// Ω(t)²/Ω₀ = Ω₀(1+p). Measurement information and back-action heating scale
/// together: C₁²/(4 Q₂₂) = 1 for every p.
pub fn particle_model(params: &ParticleParams) -> Result<ParametricModel> {
    params.validate()?;
    let omega0 = params.omega0;
    let gamma = params.gamma;
    let kappa0 = params.kappa0;
    let eta = params.eta_hom;
    let eval = move |p: f64| {
        let power = 1.0 + p;
        SystemMatrices {
            a: dmatrix![0.0, omega0; -omega0 * power, -gamma],
            c: DMatrix::from_row_slice(1, 2, &[(8.0 * kappa0 * power).sqrt(), 0.0]),
            q: dmatrix![0.0, 0.0; 0.0, 2.0 * kappa0 * power],
            n: DMatrix::zeros(1, 2),
            eta: dvector![eta],
        }
    };
    ParametricModel::from_parts(
        eval,
        params.p_min,
        params.p_max,
        2.0 * std::f64::consts::PI / omega0,
        1.0 / gamma,
    )
}

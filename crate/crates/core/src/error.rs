use thiserror::Error;

/// Errors surfaced by the numerical layer.
///
/// Validation failures (bad shapes, out-of-range parameters) are distinguished
/// from runtime failures (divergence, missing steady state) so callers can map
/// them to different exit paths.
#[derive(Debug, Error)]
pub enum Error {
    #[error("phase-space dimension must be a positive even number, got {0}")]
    InvalidDimension(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e}, floor {floor:.3e})")]
    NotPsd { min_eig: f64, floor: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("drive value {value} outside admissible range [{min}, {max}]")]
    DriveOutOfBounds { value: f64, min: f64, max: f64 },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("covariance integration diverged at step {step} (t = {t:.6e})")]
    Diverged { step: usize, t: f64 },

    #[error("no steady state reached within {max_time:.3e} s (last residual {residual:.3e})")]
    NoSteadyState { max_time: f64, residual: f64 },

    #[error("infeasible protocol: {0}")]
    InfeasibleProtocol(String),

    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),

    #[error("trial {trial}: {source}")]
    TrialFailed { trial: usize, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;

//! Command-line driver around the [`kickopt`] library: TOML run
//! configurations, CSV/SVG emission, and the four subcommands
//! (`steady-state`, `optimize`, `compare`, `simulate`).
//!
//! Everything here is deterministic given the configuration file and the
//! seed, so output tables can be diffed byte for byte across runs.

pub mod commands;
pub mod config;
pub mod output;
pub mod plot;

/// Process-level failure classes, mapped onto exit codes.
///
/// 0 means success, 2 a configuration or input problem detected before or
/// while setting up the computation, 3 a numerical failure inside it, and 4
/// an optimizer that could not make progress (outputs are still written).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) => m,
        }
    }
}

/// Exit code of a command that ran to completion but whose optimizer never
/// found a descent step.
pub const EXIT_STALLED: i32 = 4;

impl From<kickopt::Error> for CliError {
    fn from(e: kickopt::Error) -> Self {
        use kickopt::Error as E;
        match &e {
            E::Diverged { .. }
            | E::NoSteadyState { .. }
            | E::NotPsd { .. }
            | E::NotSymmetric { .. }
            | E::InfeasibleProtocol(_)
            | E::GradientUnavailable(_)
            | E::TrialFailed { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("i/o error: {e}"))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

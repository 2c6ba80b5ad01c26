use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kickopt_cli::commands::{cmd_compare, cmd_optimize, cmd_simulate, cmd_steady_state};
use kickopt_cli::config::RunContext;
use kickopt_cli::CliError;

/// Drive design and validation for impulse estimation on continuously
/// monitored oscillators.
#[derive(Parser)]
#[command(name = "kickopt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Undriven filtering/retrodiction steady states and their margins
    SteadyState(CommonArgs),
    /// Optimize the parametric drive for the configured kick
    Optimize(CommonArgs),
    /// Optimized drive against the square-wave reference
    Compare(CommonArgs),
    /// Monte Carlo check of the covariance-level predictions
    Simulate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides KICKOPT_OUT_DIR and [output].directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces [simulation].base_seed
    #[arg(long)]
    seed: Option<u64>,
    /// Drive protocol CSV (t, p) for `simulate`; zero drive when omitted
    #[arg(long)]
    protocol: Option<PathBuf>,
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let (args, is_simulate) = match &cli.command {
        Command::SteadyState(a) | Command::Optimize(a) | Command::Compare(a) => (a, false),
        Command::Simulate(a) => (a, true),
    };
    if args.protocol.is_some() && !is_simulate {
        return Err(CliError::Validation(
            "--protocol only applies to the simulate command".into(),
        ));
    }
    let ctx = RunContext::prepare(&args.config, args.out.as_deref(), args.seed)?;
    match &cli.command {
        Command::SteadyState(_) => cmd_steady_state(&ctx),
        Command::Optimize(_) => cmd_optimize(&ctx),
        Command::Compare(_) => cmd_compare(&ctx),
        Command::Simulate(a) => cmd_simulate(&ctx, a.protocol.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

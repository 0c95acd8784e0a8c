//! `qrobot`: build, run and analyse quantum robot simulations from a JSON
//! run configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("audit failed: {0}")]
    Audit(String),
    #[error(transparent)]
    Core(#[from] qrobot::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Audit(_) | CliError::Core(qrobot::Error::AuditFailure { .. }) => 2,
            CliError::Core(qrobot::Error::NormDrift { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "qrobot", version, about = "Quantum robot distance-measurement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to the configuration's `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Operator file written by `build`.
    #[arg(long)]
    pub operator: Option<PathBuf>,
    /// State file written by `run`.
    #[arg(long)]
    pub state: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble and audit the step operator.
    Build(Common),
    /// Evolve the configured initial state.
    Run(Common),
    /// Distance distributions (and fidelity) of a state.
    Stats(Common),
    /// Phase-path decomposition of the configured run.
    Paths {
        #[command(flatten)]
        common: Common,
        /// Step count; defaults to `run.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Pruning threshold; defaults to `analyses.paths.epsilon` or 0.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Accuracy sweep over kernel widths and step counts.
    Sweep(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(c) => commands::build(&c),
        Command::Run(c) => commands::run(&c),
        Command::Stats(c) => commands::stats(&c),
        Command::Paths { common, steps, epsilon } => commands::paths(&common, steps, epsilon),
        Command::Sweep(c) => commands::sweep(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qrobot: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

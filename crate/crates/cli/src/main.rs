//! Command-line driver for the quasipotential toolkit.
//!
//! ```text
//! quasipot <analyze|train|mpp|mfpt|mc|validate> [--config PATH] [--seed N]
//!          [--out DIR] [--eps LIST] [--case a|b] [--noise-case i|ii|iii]
//! ```
//!
//! Exit codes: 0 on success, 1 when a computation fails (diverged solve,
//! failed validation check, all-censored ensemble), 2 when the configuration
//! is unusable (bad file, bad flag, missing checkpoint). Resolution order for
//! every setting is: built-in default, config file, then flag. Reruns with
//! the same resolved configuration produce byte-identical artifacts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;
mod config;

use config::{parse_eps_list, FileConfig, Overrides, Run};

/// Driver error split by exit code: bad configuration (2) vs failed
/// computation (1).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Computation(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Computation(msg) => write!(f, "computation error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! computation_error_from {
    ($($ty:ty),+ $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Computation(e.to_string())
            }
        })+
    };
}

computation_error_from!(
    quasipot::dynsys::DynError,
    quasipot::trainer::TrainError,
    quasipot::landscape::LandscapeError,
    quasipot::paths::PathError,
    quasipot::exit::ExitError,
    quasipot::mc::McError,
);

#[derive(Parser)]
#[command(
    name = "quasipot",
    version,
    about = "Quasipotential landscapes, transition paths, and exit times for a bistable ecosystem model"
)]
struct Cli {
    /// TOML configuration file; unset keys use built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for training and Monte Carlo streams.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Comma-separated noise intensities, e.g. `0.03,0.05,0.08`.
    #[arg(long, global = true, value_name = "LIST")]
    eps: Option<String>,

    /// Exit boundary: `a` (line) or `b` (separatrix).
    #[arg(long, global = true, value_name = "A|B")]
    case: Option<String>,

    /// Noise amplitude case: `i`, `ii`, or `iii`.
    #[arg(long, global = true, value_name = "CASE")]
    noise_case: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fixed points, separatrix, unstable manifold, bifurcation diagram.
    Analyze,
    /// Learn the drift decomposition; writes checkpoint and diagnostics.
    Train,
    /// Most probable transition path, learned and via the shooting oracle.
    Mpp,
    /// Asymptotic mean first exit times over the intensity grid.
    Mfpt,
    /// Direct Euler-Maruyama exit-time ensembles.
    Mc,
    /// Run the oracle checks and print pass/fail per check.
    Validate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let eps = match &cli.eps {
        Some(s) => Some(parse_eps_list(s).map_err(CliError::Config)?),
        None => None,
    };
    let flags = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        eps,
        case: cli.case.clone(),
        noise_case: cli.noise_case.clone(),
    };
    let run = Run::resolve(file, &flags)?;
    match cli.cmd {
        Cmd::Analyze => commands::cmd_analyze(&run),
        Cmd::Train => commands::cmd_train(&run),
        Cmd::Mpp => commands::cmd_mpp(&run),
        Cmd::Mfpt => commands::cmd_mfpt(&run),
        Cmd::Mc => commands::cmd_mc(&run),
        Cmd::Validate => commands::cmd_validate(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("quasipot: {e}");
            match e {
                CliError::Computation(_) => ExitCode::from(1),
                CliError::Config(_) => ExitCode::from(2),
            }
        }
    }
}

//! `compartment`: generate toy datasets, identify parameters with EM,
//! predict long horizons and tabulate EM traces.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numerical or
//! convergence failure, 4 I/O failure.

mod commands;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compartment::datagen::SchemeChoice;
use compartment::estimation::ConstraintKind;

#[derive(Debug, Parser)]
#[command(name = "compartment", version, about = "Compartment thermal model of a power module")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from the toy module.
    Generate(GenerateArgs),
    /// Estimate parameters and noise covariance with EM.
    Identify(IdentifyArgs),
    /// Roll the identified model out from the initial temperatures.
    Predict(PredictArgs),
    /// Per-iteration tables from EM trace files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Built-in toy (full, reduced); overrides the config.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sharing scheme holding the true parameters.
    #[arg(long)]
    pub scheme: Option<SchemeChoice>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sharing scheme to identify.
    #[arg(long)]
    pub scheme: Option<SchemeChoice>,
    #[arg(long)]
    pub constraint: Option<ConstraintKind>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// `estimate.toml`, or the directory holding it.
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Number of steps to predict.
    #[arg(long, allow_negative_numbers = true)]
    pub horizon: Option<i64>,
    /// Ground-truth states CSV.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory for the tables; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory, needed to split diagonal-constraint traces.
    #[arg(long)]
    pub data: Option<PathBuf>,
    pub traces: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Identify(a) => commands::identify(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

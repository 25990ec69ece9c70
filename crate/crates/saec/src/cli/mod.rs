//! Command-line interface: config loading, subcommand dispatch, and exit
//! codes.
//!
//! Subcommands:
//! - `train` — run training per a config file, writing metrics, checkpoints,
//!   and sample grids into the output directory;
//! - `eval` — score a checkpoint with the deterministic policy on the
//!   held-out split;
//! - `export-samples` — dump dataset draws as PNM images for inspection.
//!
//! Exit codes are stable so scripts can branch on failure class: see
//! [`exit_codes`].

pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::env::EnvError;
use crate::trainer::TrainerError;

pub use config::{load_config, parse_config, ConfigError, DatasetKind, RunConfig};
pub use run::{
    resolve_out_dir, run_eval, run_export_samples, run_train, EvalSummary, TrainSummary,
    EVAL_CSV_HEADER, OUT_ROOT_ENV, TRAIN_CSV_HEADER,
};

/// Process exit codes, one per failure class.
pub mod exit_codes {
    /// Clean completion.
    pub const SUCCESS: i32 = 0;
    /// Unexpected internal failure (a bug, not user input).
    pub const INTERNAL: i32 = 1;
    /// Bad command line, unparseable config, or invalid settings. Matches
    /// clap's own exit code for usage errors.
    pub const CONFIG: i32 = 2;
    /// A loss went non-finite and the run aborted.
    pub const NUMERIC: i32 = 3;
    /// Filesystem trouble: unreadable data, unwritable output, lock
    /// contention, or a missing/corrupt/incompatible checkpoint.
    pub const IO: i32 = 4;
}

/// Anything a subcommand can fail with, tagged for exit-code mapping.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Env(EnvError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

fn env_exit_code(err: &EnvError) -> i32 {
    match err {
        EnvError::Io { .. } | EnvError::BadImage { .. } | EnvError::NoImages { .. } => {
            exit_codes::IO
        }
        // Everything else stems from the run's configuration (geometry,
        // unknown kinds, empty splits).
        _ => exit_codes::CONFIG,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit_codes::CONFIG,
            CliError::Trainer(TrainerError::NonFinite { .. }) => exit_codes::NUMERIC,
            CliError::Trainer(TrainerError::Checkpoint { .. }) => exit_codes::IO,
            CliError::Trainer(TrainerError::Env(e)) => env_exit_code(e),
            CliError::Trainer(_) => exit_codes::INTERNAL,
            CliError::Env(e) => env_exit_code(e),
            CliError::Io { .. } => exit_codes::IO,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "saec",
    version,
    about = "Stochastic actor-executor-critic for image-to-image translation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a policy; writes train.csv, checkpoints, and sample grids.
    Train(RunArgs),
    /// Evaluate a checkpoint deterministically on the eval split.
    Eval(RunArgs),
    /// Write dataset samples (masked input + target) as PNM images.
    ExportSamples(RunArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Config file (key = value lines); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to resume from (train) or to score (eval, required).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; overrides out_dir from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Load the config (or defaults) and apply command-line overrides.
fn effective_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = effective_config(&args)?;
            run_train(&cfg, args.checkpoint.as_deref()).map(|_| ())
        }
        Cmd::Eval(args) => {
            let cfg = effective_config(&args)?;
            let ckpt = args.checkpoint.as_deref().ok_or_else(|| {
                CliError::Config(ConfigError::Invalid(
                    "eval requires --checkpoint".to_string(),
                ))
            })?;
            run_eval(&cfg, ckpt).map(|_| ())
        }
        Cmd::ExportSamples(args) => {
            let cfg = effective_config(&args)?;
            run_export_samples(&cfg).map(|_| ())
        }
    }
}

/// Parse `std::env::args`, run the chosen subcommand, and return the
/// process exit code. The binary's `main` is a one-line wrapper over this.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => exit_codes::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

//! `anapred`: phantom generation, preprocessing, training, prediction,
//! evaluation and the comparison / ablation harnesses.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration or
//! input data, 3 missing inputs, 4 numerical failure, 5 gradient check
//! failure. Diagnostics go to stderr (verbosity from `ANAPRED_LOG`),
//! machine-readable results to stdout.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use anapred::Error;
use config::ConfigError;

#[derive(Debug, Parser)]
#[command(
    name = "anapred",
    version,
    about = "Anatomy-change prediction pipeline"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom corpus with manifest and split file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of cases.
        #[arg(long, default_value_t = 24)]
        n: usize,
    },
    /// Resample, crop / pad and normalize a corpus.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Source corpus directory.
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a corpus split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sum gradients in a fixed order (bit-reproducible runs).
        #[arg(long)]
        deterministic: bool,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict the late anatomy of cases with a trained model.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Case directories to predict.
        #[arg(long = "case", required_unless_present = "data")]
        cases: Vec<PathBuf>,
        /// Predict every test case of this corpus instead.
        #[arg(long, conflicts_with = "cases")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions and the unregistered references against CBCT21.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction directory laid out by `predict`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a CSV table.
        #[arg(long)]
        csv: bool,
        /// Evaluate every case instead of the test split.
        #[arg(long)]
        all: bool,
    },
    /// Train the five input configurations and report them side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Train the three encoders and report them with the references.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        /// Gradcheck configuration (JSON); the tiny model by default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of sampled parameter entries.
        #[arg(long)]
        samples: Option<usize>,
        /// Test hook: corrupt the analytic gradient of one group.
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
    },
}

/// Raised when the gradient check itself fails (exit code 5).
#[derive(Debug)]
pub struct GradcheckFailed(pub String);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<GradcheckFailed>() {
            return 5;
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Invalid(_)
                | Error::Json(_)
                | Error::Header { .. }
                | Error::PayloadSize { .. }
                | Error::NonBinaryMask { .. }
                | Error::Shape(_)
                | Error::WrongKind { .. } => 2,
                Error::Missing(_) => 3,
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                Error::NonFinite(_) | Error::NonFiniteLoss { .. } => 4,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ANAPRED_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

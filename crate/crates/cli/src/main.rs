//! `slicer`: pretraining, evaluation, augmentation preview, the ablation
//! ladder and gradient checks from one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slicer_core::SlicerError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Failure while running (exit 1).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<SlicerError> for CliError {
    fn from(e: SlicerError) -> Self {
        match e {
            SlicerError::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Config file and `--set` overrides shared by most subcommands.
#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys (see `slicer reference`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a key, e.g. `--set epochs=5 --set loss.tau=0.2`; applied after the file and SLICER_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Parser)]
#[command(
    name = "slicer",
    version,
    about = "Contrastive audio representation learning at desk scale"
)]
#[command(
    after_long_help = "The full list of configuration keys and their defaults is printed by `slicer reference`."
)]
struct Cli {
    /// Single-threaded, bitwise reproducible execution. Always on; accepted for
    /// compatibility.
    #[arg(long, global = true, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit k-means (with k-mix) and pretrain the encoder; writes checkpoint, centroids and loss log.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the configured checkpoint when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Linear probe of a checkpoint's frozen encoder on the held-out synthetic set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the two augmented views of an SMF1 spectrogram and a trace of the draws.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Root seed for this preview (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// KMC1 centroids; defaults to the configured kmeans path.
        #[arg(long)]
        kmeans: Option<PathBuf>,
        /// Synthetic clips placed in the mix queue before sampling.
        #[arg(long, default_value_t = 64)]
        queue: usize,
        /// Number of view pairs to draw; SMF1 files hold the first pair.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain and probe the four cumulative configurations.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every primitive, loss and a small encoder.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random input draws per primitive.
        #[arg(long, default_value_t = 3)]
        points: usize,
    },
    /// Print (or write) the documented default configuration.
    Reference {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { cfg, resume } => commands::pretrain(&cfg, resume),
        Command::Eval { checkpoint, cfg } => commands::eval(&checkpoint, &cfg),
        Command::Augment {
            input,
            out_dir,
            seed,
            kmeans,
            queue,
            repeat,
            cfg,
        } => commands::augment(&commands::AugmentArgs {
            input,
            out_dir,
            seed,
            kmeans,
            queue,
            repeat,
            cfg,
        }),
        Command::Ablation { cfg } => commands::ablation(&cfg),
        Command::Gradcheck { seed, points } => commands::gradcheck(seed, points),
        Command::Reference { out } => commands::reference(out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

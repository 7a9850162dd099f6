//! `openpan` command line: evaluate predictions for the four open-world
//! segmentation tasks, run the test-time pipeline, generate synthetic
//! scenes, and build descriptor banks.
//!
//! Exit codes: 0 success, 2 validation error (bad arguments or inputs),
//! 1 internal error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "openpan",
    version,
    about = "Open-world panoptic segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate predictions against a ground-truth manifest.
    Eval(EvalArgs),
    /// Run the test-time pipeline on one image's decoder outputs.
    Postprocess(PostprocessArgs),
    /// Generate a synthetic scene with ground truth and perfect predictions.
    Synth(SynthArgs),
    /// Descriptor-bank operations.
    #[command(subcommand)]
    Bank(BankCommand),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Anomaly,
    #[value(name = "ow-semantic")]
    OwSemantic,
    #[value(name = "os-panoptic")]
    OsPanoptic,
    #[value(name = "ow-panoptic")]
    OwPanoptic,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Task to evaluate.
    #[arg(value_enum)]
    pub task: TaskArg,
    /// Directory holding the prediction files (see README for the layout).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth manifest (JSON).
    #[arg(long)]
    pub gt: PathBuf,
    /// Output report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Parallel workers for per-image evaluation (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct PostprocessArgs {
    /// Semantic-decoder pre-logits (OWFM).
    #[arg(long)]
    pub sem: PathBuf,
    /// Contrastive-decoder pre-logits (OWFM).
    #[arg(long)]
    pub con: PathBuf,
    /// Offset predictions (OWFM, dim 2).
    #[arg(long)]
    pub offsets: PathBuf,
    /// Frozen descriptor bank from training.
    #[arg(long)]
    pub bank: PathBuf,
    /// Output directory for the predicted masks.
    #[arg(long)]
    pub out: PathBuf,
    /// Evolving discovery state, persisted across invocations.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Known thing classes (comma-separated bank indices).
    #[arg(long, value_delimiter = ',')]
    pub things: Vec<u32>,
    /// Minimum cluster size for offset clustering.
    #[arg(long, default_value_t = 32)]
    pub min_cluster_size: usize,
    /// Clustering-radius hyperparameter.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Scene spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum BankCommand {
    /// Accumulate per-class running statistics from dumped features.
    Build(BankBuildArgs),
}

#[derive(Args)]
pub struct BankBuildArgs {
    /// Directory of per-image feature maps (`<id>.owfm`).
    #[arg(long)]
    pub features: PathBuf,
    /// Directory of matching label masks (`<id>.png`).
    #[arg(long)]
    pub labels: PathBuf,
    /// Number of classes; labels outside `0..classes` are skipped as void.
    #[arg(long)]
    pub classes: usize,
    /// Expected feature dimension (checked against the files when given).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Output bank path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Errors split by exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Internal(String),
}

impl CliError {
    pub fn validation(err: impl std::fmt::Display) -> Self {
        CliError::Validation(err.to_string())
    }

    pub fn internal(err: impl std::fmt::Display) -> Self {
        CliError::Internal(err.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(args) => commands::eval(&args),
        Command::Postprocess(args) => commands::postprocess(&args),
        Command::Synth(args) => commands::synth(&args),
        Command::Bank(BankCommand::Build(args)) => commands::bank_build(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}

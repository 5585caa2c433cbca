use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vastsum_core::decoder::DEFAULT_BUDGET;
use vastsum_core::DatasetMode;

#[derive(Debug, Parser)]
#[command(
    name = "vastsum",
    version,
    about = "Keyshot video summarization with uncertainty-aware importance scores"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with recoverable segment importance
    GenData(GenDataArgs),
    /// Train from a fresh initialization; writes checkpoints and a loss log
    Train(TrainArgs),
    /// Rank-correlation report (Kendall tau-b, Spearman rho) as CSV
    Eval(EvalArgs),
    /// Knapsack keyshot masks under a length budget, as JSON
    Decode(DecodeArgs),
    /// Per-video flip rate of the decoded summary under score noise, as CSV
    StabilityReport(StabilityArgs),
    /// Finite-difference check of the analytic gradients on a tiny model
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run configuration (JSON); only the `synthetic` section is used
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Annotation style: tvsum (scores) or summe (binary summaries)
    #[arg(long)]
    pub mode: Option<DatasetMode>,
    /// Number of videos
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long, default_value = "dataset.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file; falls back to `dataset` in the config
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use fold K of a seeded k-fold split (train part for `train`, test part otherwise)
    #[arg(long, value_name = "K")]
    pub fold: Option<usize>,
    /// Number of folds for --fold
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Overrides `train.seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.mode`; defaults to the dataset's mode
    #[arg(long)]
    pub mode: Option<DatasetMode>,
    /// Overrides `train.epochs`
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory; falls back to `out_dir` in the config, then `run`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score the reference targets against themselves instead of a model
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Evaluation protocol; defaults to the dataset's mode
    #[arg(long)]
    pub mode: Option<DatasetMode>,
    /// Seed of the fold split
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Summary length budget as a fraction of the video, in (0, 1]
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub rho: f64,
    /// Seed of the fold split
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON destination; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub rho: f64,
    /// Noise standard deviation; defaults to `loss.sigma_perturb`
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Seeds the perturbations and the fold split
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run configuration; only the `loss` section is used
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt one backward rule (negative control)
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

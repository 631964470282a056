mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pixelseed::loss::BackgroundMode;

pub const OUT_ROOT_ENV: &str = "PIXELSEED_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "pixelseed", version, about = "Seed-based instance proposals from pixel embeddings")]
pub struct Cli {
    /// Default root for outputs when a subcommand is not given an explicit path.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    pub out_root: PathBuf,

    /// Maximum worker threads for per-scene work.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic labelled scenes.
    Synth(SynthArgs),
    /// Fit a per-pixel embedding to a scene's instance labels.
    FitEmbedding(FitArgs),
    /// Select seeds and grow ranked mask proposals.
    Propose(ProposeArgs),
    /// Score proposals against ground truth.
    Evaluate(EvaluateArgs),
    /// Run propose and evaluate over a grid of diversity weights.
    SweepAlpha(SweepArgs),
    /// Finite-difference check of the loss gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub scenes: u64,
    /// Square side length; overrides the spec file.
    #[arg(long)]
    pub size: Option<usize>,
    /// Scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub min_instances: Option<usize>,
    #[arg(long)]
    pub max_instances: Option<usize>,
    #[arg(long)]
    pub classes: Option<u16>,
    /// TOML file with scene spec fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory (default: <out-root>/scenes).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SceneSelection {
    /// Scene directory; repeatable.
    #[arg(long = "scene")]
    pub scenes: Vec<PathBuf>,
    /// Directory whose subdirectories are scenes (default: <out-root>/scenes).
    #[arg(long)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Background {
    Exclude,
    Repel,
    Group,
}

impl From<Background> for BackgroundMode {
    fn from(b: Background) -> Self {
        match b {
            Background::Exclude => BackgroundMode::Exclude,
            Background::Repel => BackgroundMode::Repel,
            Background::Group => BackgroundMode::Group,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub scenes: SceneSelection,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub step: f64,
    /// Points sampled per instance in each batch.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[arg(long, value_enum, default_value_t = Background::Repel)]
    pub background: Background,
}

#[derive(Debug, Args)]
pub struct ProposalOpts {
    #[arg(long, default_value_t = 20)]
    pub num_seeds: usize,
    #[arg(long, value_delimiter = ',', default_values_t = pixelseed::proposer::DEFAULT_GROW_THRESHOLDS)]
    pub tau_grow: Vec<f64>,
    /// Classifier thresholds; taken from the score files when omitted.
    #[arg(long, value_delimiter = ',')]
    pub tau_cls: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub seediness_floor: f64,
    /// Synthesize class scores from the ground truth instead of reading score files.
    #[arg(long)]
    pub oracle_scores: bool,
    #[arg(long, default_value_t = 0.01)]
    pub oracle_eps: f64,
    /// IoU a grown mask needs for the oracle to assign it an object class.
    #[arg(long, default_value_t = 0.5)]
    pub oracle_iou: f64,
    /// Number of foreground classes for oracle scores (default: from the label map).
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProposeArgs {
    #[command(flatten)]
    pub scenes: SceneSelection,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    #[command(flatten)]
    pub opts: ProposalOpts,
    /// File name written inside each scene directory.
    #[arg(long, default_value = "proposals.jsonl")]
    pub output: String,
}

#[derive(Debug, Args)]
pub struct EvalOpts {
    #[arg(long, value_delimiter = ',', default_values_t = pixelseed::eval::DEFAULT_IOU_THRESHOLDS)]
    pub iou: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = pixelseed::eval::DEFAULT_BUDGETS)]
    pub budgets: Vec<usize>,
    /// Drop ground-truth instances flagged difficult.
    #[arg(long)]
    pub exclude_difficult: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub scenes: SceneSelection,
    /// Proposal file name inside each scene directory.
    #[arg(long, default_value = "proposals.jsonl")]
    pub proposals: String,
    #[command(flatten)]
    pub eval: EvalOpts,
    /// Output directory (default: <out-root>/evaluate).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenes: SceneSelection,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6])]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    pub opts: ProposalOpts,
    #[arg(long, value_delimiter = ',', default_values_t = pixelseed::eval::DEFAULT_IOU_THRESHOLDS)]
    pub iou: Vec<f64>,
    /// Output directory (default: <out-root>/sweep-alpha).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub rel_tol: f64,
    /// Scale analytic gradients by 1 + 1e-2 before comparing.
    #[arg(long, hide = true)]
    pub perturb_grad: bool,
    /// Output directory (default: <out-root>/grad-check).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code_for(&err))
        }
    }
}

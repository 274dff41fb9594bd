//! Flag definitions. Every tunable is optional on the command line; values
//! come from the flag, else the optional JSON config file, else the built-in
//! default (the defaults bake in the reference hyperparameters: lambda 0.1,
//! 100 inner iterations, delta 0.01, N=4, L=16, lr 0.002, warmup 1e-5).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "plot", version, about = "Few-shot prompt classification with optimal transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic feature dataset
    Gen(GenArgs),
    /// Train a model on a dataset file
    Train(TrainArgs),
    /// Evaluate a model file on a dataset's test split
    Eval(EvalArgs),
    /// Run the full method table and prompt-count sweep over several seeds
    Ablate(AblateArgs),
    /// Compare the entropic solver against the exact brute-force oracle
    OracleCheck(OracleCheckArgs),
    /// Audit the analytic gradient with central finite differences
    GradCheck(GradCheckArgs),
    /// Export transport-plan heatmaps for one image
    InspectPlan(InspectPlanArgs),
}

/// Generator flags (shared by `gen` and `ablate`).
#[derive(Args, Debug, Clone, Default)]
pub struct GenFlags {
    /// Number of classes
    #[arg(long)]
    pub classes: Option<usize>,
    /// Attribute prototypes per class
    #[arg(long)]
    pub attributes: Option<usize>,
    /// Training images per class
    #[arg(long)]
    pub shots: Option<usize>,
    /// Test images per class
    #[arg(long)]
    pub test: Option<usize>,
    /// Local features per image
    #[arg(long)]
    pub m: Option<usize>,
    /// Feature dimension
    #[arg(long)]
    pub dim: Option<usize>,
    /// Feature noise scale
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    /// Shared background prototypes (0 disables)
    #[arg(long)]
    pub bg: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub gen: GenFlags,
    /// Generator seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset path (a .manifest.json sidecar is written next to it)
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Training flags (shared by `train` and `ablate`).
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Method: plot | coop | g | g+v | g+e | m | m+v
    #[arg(long)]
    pub method: Option<String>,
    /// Prompts per class
    #[arg(long = "n-prompts")]
    pub n_prompts: Option<usize>,
    /// Softmax temperature
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Entropy weight of the inner solver
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Inner-loop iteration cap
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
    /// Inner-loop early-stop threshold
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    /// Solve in the log domain (safeguard for small lambda)
    #[arg(long)]
    pub stabilized: bool,
    /// Variance-regularizer weight for the g+v / m+v variants
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Initial learning rate
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Constant learning rate for epoch 0
    #[arg(long = "warmup-lr", allow_negative_numbers = true)]
    pub warmup_lr: Option<f64>,
    /// Learnable context tokens per prompt
    #[arg(long = "ctx-len")]
    pub ctx_len: Option<usize>,
    /// Token embedding width (defaults to the feature dimension)
    #[arg(long = "embed-dim")]
    pub embed_dim: Option<usize>,
    /// Keep the training order fixed instead of shuffling
    #[arg(long = "no-shuffle")]
    pub no_shuffle: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Output model path
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Run seed (initialization and shuffling)
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// Report output path (default: <model>.eval.json)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Existing dataset file; omitted, one is generated per seed
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Seeds, comma separated
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleCheckArgs {
    /// Cost matrix rows (lcm(rows, cols) must be at most 10)
    #[arg(long)]
    pub rows: Option<usize>,
    /// Cost matrix columns
    #[arg(long)]
    pub cols: Option<usize>,
    /// Random instances to test
    #[arg(long)]
    pub trials: Option<usize>,
    /// Entropy weight
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Early-stop threshold for the solver
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    /// Iteration cap for the solver
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
    /// Seed for the random instances
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// First image of the audit batch
    #[arg(long = "image-index")]
    pub image_index: Option<usize>,
    /// Batch size of the audit batch
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Finite-difference step
    #[arg(long, allow_negative_numbers = true)]
    pub eps: Option<f64>,
    /// Context coordinates to sample
    #[arg(long)]
    pub samples: Option<usize>,
    /// Coordinate-sampling seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InspectPlanArgs {
    /// Dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Model file (must be a transport-head model)
    #[arg(long)]
    pub model: PathBuf,
    /// Image to export
    #[arg(long = "image-index")]
    pub image_index: Option<usize>,
    /// Restrict the export to one class
    #[arg(long)]
    pub class: Option<usize>,
    /// Output directory (default: plan_export)
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// Heatmap grid height (with --grid-w) when M is not a perfect square
    #[arg(long = "grid-h")]
    pub grid_h: Option<usize>,
    /// Heatmap grid width
    #[arg(long = "grid-w")]
    pub grid_w: Option<usize>,
}

/// Optional JSON config file: a flat object whose keys are the long flag
/// names. Flags always win over file values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub classes: Option<usize>,
    pub attributes: Option<usize>,
    pub shots: Option<usize>,
    pub test: Option<usize>,
    pub m: Option<usize>,
    pub dim: Option<usize>,
    pub sigma: Option<f64>,
    pub bg: Option<usize>,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub n_prompts: Option<usize>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub max_iter: Option<usize>,
    pub delta: Option<f64>,
    pub stabilized: Option<bool>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_lr: Option<f64>,
    pub ctx_len: Option<usize>,
    pub embed_dim: Option<usize>,
    pub shuffle: Option<bool>,
    pub seeds: Option<Vec<u64>>,
}

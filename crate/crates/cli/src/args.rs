use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "moral-align",
    version,
    about = "Moral-foundation aware contrastive alignment over precomputed features",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Precedence for configurable values: flags > `--config` file > defaults.
#[derive(Debug, Args)]
pub struct Common {
    /// Directory for every output, including run_manifest.json.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for all randomness in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` file applied on top of the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra configuration entry, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Data {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub image_bank: PathBuf,
    #[arg(long)]
    pub text_bank: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[command(flatten)]
    pub data: Data,
    #[arg(long, default_value = "normal")]
    pub variant: String,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// `literal` or `match_scale`.
    #[arg(long)]
    pub moral_scale: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SwapModeArg {
    Mild,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Image,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Threshold SMID ratings into a labeled manifest.
    PreprocessSmid {
        /// CSV with image_id and {foundation}_x / {foundation}_y columns.
        #[arg(long)]
        ratings: PathBuf,
        /// CSV with image_id,caption rows.
        #[arg(long)]
        captions: PathBuf,
    },
    /// Generate a synthetic corpus with feature banks.
    Synth {
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long)]
        signal: Option<f64>,
        #[arg(long)]
        foundation_signal: Option<f64>,
    },
    /// Train the per-foundation image classifier.
    CompassTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image_bank: PathBuf,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Replace manifest labels with classifier predictions.
    CompassLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image_bank: PathBuf,
    },
    /// Stratified train/val/test assignment.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = moral_align_core::dataset::DEFAULT_VAL_FRACTION)]
        val: f64,
        #[arg(long, default_value_t = moral_align_core::dataset::DEFAULT_TEST_FRACTION)]
        test: f64,
    },
    /// Replicate training records with rotated captions.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = moral_align_core::dataset::DEFAULT_AUGMENT_COPIES)]
        copies: usize,
    },
    /// Swap images or captions between same-label training records.
    Swap {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SwapModeArg::Mild)]
        mode: SwapModeArg,
        #[arg(long)]
        mix_fraction: Option<f64>,
        /// Per label group; mild mode only.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Train the image and text projection encoders.
    Train(TrainFlags),
    /// One training run per λ.
    Sweep {
        #[command(flatten)]
        train: TrainFlags,
        /// Comma list or start:stop:step.
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5")]
        lambdas: String,
    },
    /// Bootstrap metric table for a split.
    Eval {
        #[command(flatten)]
        data: Data,
        /// Alignment checkpoint; raw features when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value = "map,dp,silhouette")]
        metrics: String,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
    },
    /// Ranked neighbour lists.
    Retrieve {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// i2i, t2t, i2t or t2i.
        #[arg(long, default_value = "i2t")]
        direction: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Query record ids; every record of the split when omitted.
        #[arg(long = "query")]
        queries: Vec<String>,
    },
    /// Inter-annotator agreement from an annotation export.
    Agreement {
        /// CSV export from the annotation service.
        #[arg(long)]
        ratings: PathBuf,
        /// Manifest whose labels are compared with the majority vote.
        #[arg(long)]
        model_labels: Option<PathBuf>,
        #[arg(long, default_value_t = moral_align_core::agreement::DEFAULT_MIN_STD)]
        min_std: f64,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
    },
    /// Encode a feature bank with a trained encoder.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, value_enum)]
        side: Side,
    },
    /// Partition manifest images into annotation batches.
    Plan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_batches: usize,
        #[arg(long, default_value_t = 50)]
        per_batch: usize,
        #[arg(long, default_value_t = 3)]
        annotators_per_batch: usize,
    },
    /// Run the annotation HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        image_dir: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        instructions: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PreprocessSmid { .. } => "preprocess-smid",
            Command::Synth { .. } => "synth",
            Command::CompassTrain { .. } => "compass-train",
            Command::CompassLabel { .. } => "compass-label",
            Command::Split { .. } => "split",
            Command::Augment { .. } => "augment",
            Command::Swap { .. } => "swap",
            Command::Train(_) => "train",
            Command::Sweep { .. } => "sweep",
            Command::Eval { .. } => "eval",
            Command::Retrieve { .. } => "retrieve",
            Command::Agreement { .. } => "agreement",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::Plan { .. } => "plan",
            Command::Serve { .. } => "serve",
        }
    }
}

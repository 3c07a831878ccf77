use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Masked-image-modeling OOD detection: train, extract, score, evaluate.
#[derive(Debug, Parser)]
#[command(name = "mood", version)]
pub struct Cli {
    /// Worker threads for scoring and extraction (falls back to MOOD_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON config with optional sections pretrain, finetune, extract, fit,
    /// score, eval and a global seed. Flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sinusoidal-texture image dataset.
    Gen(GenArgs),
    /// Pretrain a toy encoder by masked patch reconstruction.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier head with label smoothing.
    Finetune(FinetuneArgs),
    /// Extract pooled features (and optionally logits) as MOODFD dumps.
    Extract(ExtractArgs),
    /// Fit class-conditional Gaussians to labelled features.
    Fit(FitArgs),
    /// Score samples with one OOD metric.
    Score(ScoreArgs),
    /// AUROC, FPR at a fixed TPR and histograms from score files.
    Eval(EvalArgs),
    /// Count accepted OOD samples per nearest ID class.
    Confusion(ConfusionArgs),
    /// Run gradient checks and oracle comparisons.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 8)]
    pub side: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Draw textures from the held-out frequency band.
    #[arg(long)]
    pub ood: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// `pixel` or `codebook`.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained (or previously fine-tuned) checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `multi_class`, `one_class` or `intermediate`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Classifier head width.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub target_class: Option<usize>,
    /// Label-smoothing strength.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Feature dump (MOODFD).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write classifier logits (MOODFD).
    #[arg(long)]
    pub logits_out: Option<PathBuf>,
    /// `pooled_final` or `pooled_prelogit`.
    #[arg(long)]
    pub layer: Option<String>,
    /// Stored precision, `f32` or `f64`.
    #[arg(long)]
    pub dtype: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Labelled ID feature dump.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Diagonal loading relative to the mean feature variance.
    #[arg(long)]
    pub reg: Option<f64>,
    /// Standardize feature columns before fitting.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Logit dump for msp/entropy/energy, feature dump for gradnorm/mahalanobis.
    #[arg(long)]
    pub input: PathBuf,
    /// `msp`, `entropy`, `energy`, `gradnorm` or `mahalanobis`.
    #[arg(long)]
    pub metric: Option<String>,
    /// `index,score` CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Fitted Gaussian model (mahalanobis).
    #[arg(long)]
    pub gaussian: Option<PathBuf>,
    /// Checkpoint whose classifier head feeds gradnorm.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// ID score CSV.
    #[arg(long)]
    pub id: PathBuf,
    /// OOD score CSV; repeat for several sets. Sets are named by file stem.
    #[arg(long, required = true)]
    pub ood: Vec<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tpr: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Directory for histogram CSVs (`id.hist.csv`, `<set>.hist.csv`).
    #[arg(long)]
    pub histogram_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfusionArgs {
    #[arg(long)]
    pub gaussian: PathBuf,
    #[arg(long)]
    pub ood_features: PathBuf,
    /// Mahalanobis scores of the ID test set, used for the threshold.
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tpr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Optional JSON summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

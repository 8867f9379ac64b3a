//! `respscreen` — operator entry point for the screening pipeline.
//!
//! Every subcommand is a reproducible batch step: it writes its artifacts
//! plus a `run_config.json` snapshot of the resolved parameters, prints a
//! one-line JSON summary to stdout, and on failure emits machine-readable
//! error JSON on stderr with a nonzero exit code.

mod commands;
mod support;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "respscreen",
    version,
    about = "Respiratory-sound screening pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic synthetic corpus plus manifest.
    Synth(SynthArgs),
    /// Quality-control a manifest: per-record reports plus a filtered manifest.
    Qc(QcArgs),
    /// Render multi-window mel-spectrogram images for every clip.
    Featurize(FeaturizeArgs),
    /// Subject-level stratified train/test split.
    Split(SplitArgs),
    /// Train the spectrogram transformer (optionally with LoRA adapters).
    Train(TrainArgs),
    /// Evaluate a checkpoint: metrics report, ROC curve, per-clip predictions.
    Eval(EvalArgs),
    /// Classify one image with a checkpoint.
    Infer(InferArgs),
    /// Export the class-token attention map for one image.
    Attention(AttentionArgs),
    /// Print the structured prompt for one manifest record.
    Prompt(PromptArgs),
    /// Run prompt-ablation experiments against a backend or the offline mock.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub subjects_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub recordings_per_subject: usize,
    /// Recording length in seconds.
    #[arg(long, default_value_t = 25.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 16000)]
    pub sample_rate: u32,
    /// Wheeze fundamental band (Hz).
    #[arg(long, default_value_t = 100.0)]
    pub wheeze_low: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub wheeze_high: f64,
    /// Wheeze tone-to-noise ratio in dB.
    #[arg(long, default_value_t = 10.0)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct QcArgs {
    /// Input manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the filtered manifest and QC reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum acceptable duration in seconds.
    #[arg(long, default_value_t = 14.0)]
    pub min_duration: f64,
    /// Clip-fraction above which amplitude_defect is flagged.
    #[arg(long, default_value_t = 0.02)]
    pub clip_threshold: f64,
    /// |sample| at or above this counts as clipped.
    #[arg(long, default_value_t = 0.999)]
    pub clip_level: f64,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Clip length in seconds (clips are non-overlapping).
    #[arg(long, default_value_t = 5.0)]
    pub clip_seconds: f64,
    /// Three STFT window lengths in ms, comma separated.
    #[arg(long, default_value = "25,100,175")]
    pub windows: String,
    #[arg(long, default_value_t = 10.0)]
    pub hop_ms: f64,
    #[arg(long, default_value_t = 128)]
    pub n_mels: usize,
    #[arg(long, default_value_t = 0.0)]
    pub fmin: f64,
    #[arg(long, default_value_t = 8000.0)]
    pub fmax: f64,
    /// Pixel encoding; file output requires `byte`.
    #[arg(long, value_enum, default_value_t = EncodingArg::Byte)]
    pub encoding: EncodingArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Png)]
    pub format: FormatArg,
    /// All audio is resampled to this rate before featurization.
    #[arg(long, default_value_t = 16000)]
    pub target_rate: u32,
    /// Seconds trimmed from each end before normalization.
    #[arg(long, default_value_t = 0.5)]
    pub trim_seconds: f64,
    /// Peak amplitude after normalization.
    #[arg(long, default_value_t = 0.99)]
    pub peak: f32,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Subsample to equal class sizes before splitting.
    #[arg(long, default_value_t = false)]
    pub balance: bool,
    /// Subjects kept per class (implies balancing).
    #[arg(long)]
    pub pool_size: Option<usize>,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct TrainArgs {
    /// Featurize output directory holding images + features_manifest.jsonl.
    #[arg(long)]
    pub features: PathBuf,
    /// Separate featurized validation set; default is a subject-level
    /// sub-split of the training set.
    #[arg(long)]
    pub val_features: Option<PathBuf>,
    /// Fraction of training subjects held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// Rectangular patch height; overrides --patch for the vertical dim.
    #[arg(long)]
    pub patch_h: Option<usize>,
    /// Rectangular patch width; overrides --patch for the horizontal dim.
    #[arg(long)]
    pub patch_w: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Linear warmup steps before the schedule takes over.
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Continue from an existing checkpoint instead of fresh weights
    /// (architecture flags are then taken from the checkpoint).
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    /// Enable LoRA adapters with this rank; base weights freeze.
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long, default_value_t = 16.0)]
    pub lora_alpha: f64,
    /// Adapter sites: comma list of qkv,out,fc1,fc2,patch.
    #[arg(long, default_value = "qkv,out")]
    pub lora_targets: String,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder layer to read (default: last).
    #[arg(long)]
    pub layer: Option<usize>,
    /// Nearest-neighbor upscale factor for the heatmap PNG.
    #[arg(long, default_value_t = 16)]
    pub scale: usize,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct PromptArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Record whose patient metadata fills the prompt.
    #[arg(long)]
    pub record_id: String,
    /// Omit the patient block.
    #[arg(long, default_value_t = false)]
    pub no_demographics: bool,
    /// Omit the spectrogram-parameters block.
    #[arg(long, default_value_t = false)]
    pub no_technical: bool,
    #[arg(long, default_value = "25,100,175")]
    pub windows: String,
    #[arg(long, default_value_t = 10.0)]
    pub hop_ms: f64,
    #[arg(long, default_value_t = 128)]
    pub n_mels: usize,
    #[arg(long, default_value_t = 0.0)]
    pub fmin: f64,
    #[arg(long, default_value_t = 8000.0)]
    pub fmax: f64,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which block to ablate against the full prompt.
    #[arg(long, value_enum, default_value_t = AblateVariant::Demographics)]
    pub ablate: AblateVariant,
    /// HTTP backend endpoint; omitted = offline deterministic mock.
    #[arg(long)]
    pub backend_url: Option<String>,
    /// HTTP timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
    /// Cap the number of clips consulted (smoke runs).
    #[arg(long)]
    pub max_items: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingArg {
    Unit,
    Byte,
}

#[derive(ValueEnum, Clone, Copy, Debug, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Png,
    Tiff,
}

#[derive(ValueEnum, Clone, Copy, Debug, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleArg {
    Cosine,
    Constant,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AblateVariant {
    Demographics,
    Technical,
    None,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": "usage", "message": e.to_string()}})
            );
            std::process::exit(2);
        }
    };
    if let Err(err) = commands::run(cli.command) {
        eprintln!(
            "{}",
            serde_json::json!({"error": {"kind": err.kind, "message": err.message}})
        );
        std::process::exit(1);
    }
}

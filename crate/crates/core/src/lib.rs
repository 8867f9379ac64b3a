//! Respiratory-sound screening pipeline.
//!
//! The crate is organized along the stages of the screening workflow:
//!
//! - [`ingest`] — WAV decoding, resampling, quality control, trimming and
//!   segmentation into fixed-length clips
//! - [`features`] — STFT, mel filterbanks, and the three-window RGB
//!   spectrogram encoding consumed by the models
//! - [`ast`] — a from-scratch patch-transformer classifier with manual
//!   backpropagation, AdamW training, LoRA adapters, and attention maps
//! - [`metrics`] — confusion counts, screening metrics, ROC AUC, Youden index
//! - [`vlm`] — structured prompt construction, JSON diagnosis parsing, and
//!   the pluggable inference backend used for prompt ablations
//! - [`manifest`] — dataset manifest schema, validation, summaries, and
//!   leakage-free subject-level splits
//! - [`synth`] — deterministic synthetic corpus generator used in place of
//!   the clinical dataset

pub mod ast;
pub mod features;
pub mod ingest;
pub mod manifest;
pub mod metrics;
pub mod synth;
pub mod vlm;

pub use ast::{AstConfig, AstModel, AttentionMap, LoraSpec, TrainConfig};
pub use features::{Encoding, FeatureParams, MelSpectrogram, RgbSpectrogramImage};
pub use ingest::{AudioRecording, Clip, QcReport};
pub use manifest::{RecordEntry, SplitSpec};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use synth::SynthSpec;
pub use vlm::{DiagnosisLabel, DiagnosisOutput, PatientMetadata, PromptSpec};

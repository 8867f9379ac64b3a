//! Shared plumbing for the subcommands: error reporting, run-config
//! snapshots, and the per-clip feature manifest that links images back to
//! records and labels.

use std::path::{Path, PathBuf};

use respscreen_core::ast::AstError;
use respscreen_core::features::{FeatureError, RgbSpectrogramImage};
use respscreen_core::ingest::IngestError;
use respscreen_core::manifest::{ManifestError, RecordingPoint, Sex};
use respscreen_core::metrics::MetricsError;
use respscreen_core::synth::SynthError;
use respscreen_core::vlm::VlmError;
use serde::{Deserialize, Serialize};

/// Error carried to `main` and rendered as `{"error": {kind, message}}`.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }
}

macro_rules! from_error {
    ($ty:ty, $kind:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($kind, e.to_string())
            }
        }
    };
}

from_error!(std::io::Error, "io");
from_error!(IngestError, "ingest");
from_error!(FeatureError, "features");
from_error!(AstError, "model");
from_error!(MetricsError, "metrics");
from_error!(ManifestError, "manifest");
from_error!(SynthError, "synth");
from_error!(serde_json::Error, "serialization");

impl From<VlmError> for CliError {
    fn from(e: VlmError) -> Self {
        match e {
            VlmError::Backend(_) => CliError::new("backend", e.to_string()),
            VlmError::InvalidParameter(_) => CliError::new("prompt", e.to_string()),
        }
    }
}

/// Writes `run_config.json` next to a command's outputs: the command name and
/// its fully resolved parameters. Contains nothing volatile, so reruns are
/// byte-identical.
pub fn write_run_config<T: Serialize>(
    out_dir: &Path,
    command: &str,
    args: &T,
) -> Result<(), CliError> {
    let doc = serde_json::json!({ "command": command, "params": args });
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(out_dir.join("run_config.json"), text + "\n")?;
    Ok(())
}

pub fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::new("io", format!("creating {}: {e}", path.display())))
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve_relative(base_file_or_dir: &Path, rel: &str) -> PathBuf {
    let base = if base_file_or_dir.is_dir() {
        base_file_or_dir
    } else {
        base_file_or_dir.parent().unwrap_or(Path::new("."))
    };
    base.join(rel)
}

pub const FEATURES_MANIFEST: &str = "features_manifest.jsonl";

/// One featurized clip: the image file plus everything needed downstream
/// (labels for training/eval, patient context for prompts).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRow {
    pub record_id: String,
    pub subject_id: String,
    pub clip_index: usize,
    /// Image path relative to the features directory.
    pub image_path: String,
    /// 1 = asthma, 0 = not asthma.
    pub label: u8,
    pub diagnosis: String,
    pub sex: Sex,
    pub age_years: u32,
    pub recording_point: RecordingPoint,
}

pub fn save_feature_rows(dir: &Path, rows: &[FeatureRow]) -> Result<(), CliError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    std::fs::write(dir.join(FEATURES_MANIFEST), text)?;
    Ok(())
}

pub fn load_feature_rows(dir: &Path) -> Result<Vec<FeatureRow>, CliError> {
    let path = dir.join(FEATURES_MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::new("io", format!("reading {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: FeatureRow = serde_json::from_str(line).map_err(|e| {
            CliError::new(
                "features",
                format!("{} line {}: {e}", path.display(), lineno + 1),
            )
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::new(
            "features",
            format!("{} contains no rows", path.display()),
        ));
    }
    Ok(rows)
}

/// Loads every row's image and pairs it with the label, verifying that all
/// images share one geometry (the model input contract).
pub fn load_labeled_images(
    dir: &Path,
    rows: &[FeatureRow],
) -> Result<Vec<(RgbSpectrogramImage, usize)>, CliError> {
    let mut out = Vec::with_capacity(rows.len());
    let mut dims: Option<(usize, usize)> = None;
    for row in rows {
        let path = dir.join(&row.image_path);
        let img = respscreen_core::features::read_image(&path)
            .map_err(|e| CliError::new("features", format!("{}: {e}", path.display())))?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(CliError::new(
                    "features",
                    format!(
                        "image {} is {}x{}, expected {}x{}",
                        path.display(),
                        img.height,
                        img.width,
                        d.0,
                        d.1
                    ),
                ));
            }
            _ => {}
        }
        out.push((img, row.label as usize));
    }
    Ok(out)
}

/// Prints the command's one-line machine-readable success summary.
pub fn print_summary(value: &serde_json::Value) {
    println!("{value}");
}

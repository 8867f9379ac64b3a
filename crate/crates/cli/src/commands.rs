//! The ten subcommand implementations.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use respscreen_core::ast::{
    class_attention_map, evaluate, load_checkpoint, save_checkpoint, train, AstConfig, AstModel,
    LoraSpec, LoraTarget, Schedule, TrainConfig,
};
use respscreen_core::features::{
    multiwindow_rgb, read_image, write_image, Encoding, FeatureParams, ImageFileFormat, PixelData,
    RgbSpectrogramImage,
};
use respscreen_core::ingest::{
    assess_quality, decode_failure_report, decode_wav, resample, segment_clips,
    trim_and_normalize, QcParams,
};
use respscreen_core::manifest::{
    filter_by_subjects, load_manifest, save_manifest, stratified_subject_split, summarize,
    Diagnosis, RecordEntry, RecordQuality, SplitSpec,
};
use respscreen_core::metrics::{confusion, roc_auc, roc_points, youden_optimal_point};
use respscreen_core::synth::{generate, SynthSpec};
use respscreen_core::vlm::{
    build_prompt, run_ablation, AblationItem, AblationSpec, DemographicsGatedMock, HttpBackend,
    InferenceBackend, PatientMetadata, PromptSpec,
};

use crate::support::*;
use crate::{
    AblateArgs, AblateVariant, AttentionArgs, Command, EncodingArg, EvalArgs, FeaturizeArgs,
    FormatArg, InferArgs, PromptArgs, QcArgs, ScheduleArg, SplitArgs, SynthArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Qc(args) => cmd_qc(args),
        Command::Featurize(args) => cmd_featurize(args),
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Attention(args) => cmd_attention(args),
        Command::Prompt(args) => cmd_prompt(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        n_subjects_per_class: args.subjects_per_class,
        recordings_per_subject: args.recordings_per_subject,
        duration_s: args.duration,
        sample_rate: args.sample_rate,
        wheeze_freq_range: (args.wheeze_low, args.wheeze_high),
        wheeze_snr_db: args.snr_db,
        seed: args.seed,
    };
    ensure_out_dir(&args.out)?;
    let entries = generate(&spec, &args.out)?;
    write_run_config(&args.out, "synth", &args)?;
    let summary = summarize(&entries);
    print_summary(&json!({
        "command": "synth",
        "out": args.out,
        "records": entries.len(),
        "by_diagnosis": summary.by_diagnosis,
    }));
    Ok(())
}

fn cmd_qc(args: QcArgs) -> Result<(), CliError> {
    let entries = load_manifest(&args.manifest)?;
    ensure_out_dir(&args.out)?;
    let params = QcParams {
        min_duration_s: args.min_duration,
        clip_threshold: args.clip_threshold,
        clip_level: args.clip_level as f32,
    };

    let mut kept = Vec::new();
    let mut reports = String::new();
    let mut dropped = 0usize;
    for entry in &entries {
        let path = resolve_relative(&args.manifest, &entry.audio_path);
        let report = match std::fs::read(&path) {
            Ok(bytes) => match decode_wav(&bytes, &entry.record_id) {
                Ok(rec) => assess_quality(&rec, &params),
                Err(_) => decode_failure_report(),
            },
            Err(_) => decode_failure_report(),
        };
        let flagged = report.technical_defect || report.amplitude_defect || report.decode_error;
        let poor = entry.record_quality == RecordQuality::Poor;
        reports.push_str(&serde_json::to_string(&json!({
            "record_id": entry.record_id,
            "report": report,
            "kept": !flagged && !poor,
        }))?);
        reports.push('\n');
        if flagged || poor {
            dropped += 1;
        } else {
            kept.push(entry.clone());
        }
    }

    // The filtered manifest sits in a new directory; keep audio reachable by
    // rewriting paths relative to it.
    let manifest_dir = args
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .canonicalize()
        .map_err(|e| CliError::new("io", e.to_string()))?;
    for entry in &mut kept {
        entry.audio_path = manifest_dir.join(&entry.audio_path).display().to_string();
    }

    std::fs::write(args.out.join("qc_reports.jsonl"), reports)?;
    save_manifest(&kept, &args.out.join("manifest.jsonl"))?;
    write_run_config(&args.out, "qc", &args)?;
    print_summary(&json!({
        "command": "qc",
        "total": entries.len(),
        "kept": kept.len(),
        "dropped": dropped,
        "filtered_manifest": args.out.join("manifest.jsonl"),
    }));
    Ok(())
}

fn parse_windows(text: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(format!("--windows must be three numbers: {e}")))?;
    if parts.len() != 3 {
        return Err(CliError::usage(format!(
            "--windows needs exactly three lengths, got {}",
            parts.len()
        )));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn feature_params(
    windows: &str,
    hop_ms: f64,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> Result<FeatureParams, CliError> {
    Ok(FeatureParams {
        window_lengths_ms: parse_windows(windows)?,
        hop_ms,
        n_mels,
        f_min_hz: fmin,
        f_max_hz: fmax,
        log_floor: FeatureParams::default().log_floor,
    })
}

fn cmd_featurize(args: FeaturizeArgs) -> Result<(), CliError> {
    let encoding = match args.encoding {
        EncodingArg::Byte => Encoding::Byte,
        EncodingArg::Unit => {
            return Err(CliError::usage(
                "unit encoding is the in-memory training representation; \
                 file output requires --encoding byte",
            ))
        }
    };
    let (format, ext) = match args.format {
        FormatArg::Png => (ImageFileFormat::Png, "png"),
        FormatArg::Tiff => (ImageFileFormat::Tiff, "tiff"),
    };
    let params = feature_params(&args.windows, args.hop_ms, args.n_mels, args.fmin, args.fmax)?;

    let entries = load_manifest(&args.manifest)?;
    ensure_out_dir(&args.out)?;
    let images_dir = args.out.join("images");
    ensure_out_dir(&images_dir)?;

    let mut rows: Vec<FeatureRow> = Vec::new();
    for entry in &entries {
        let path = resolve_relative(&args.manifest, &entry.audio_path);
        let bytes = std::fs::read(&path)
            .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
        let rec = decode_wav(&bytes, &entry.record_id)?;
        let rec = resample(&rec, args.target_rate)?;
        let rec = trim_and_normalize(&rec, args.trim_seconds, args.trim_seconds, args.peak)?;
        let clips = segment_clips(&rec, args.clip_seconds, args.clip_seconds)?;
        for (k, clip) in clips.iter().enumerate() {
            let img = multiwindow_rgb(clip, &params, encoding)?;
            let file = format!("images/{}-c{:02}.{}", entry.record_id, k, ext);
            write_image(&img, &args.out.join(&file), format)?;
            rows.push(FeatureRow {
                record_id: entry.record_id.clone(),
                subject_id: entry.subject_id.clone(),
                clip_index: k,
                image_path: file,
                label: u8::from(entry.diagnosis == Diagnosis::Asthma),
                diagnosis: entry.diagnosis.as_str().to_string(),
                sex: entry.sex,
                age_years: entry.age_years,
                recording_point: entry.recording_point,
            });
        }
    }
    if rows.is_empty() {
        return Err(CliError::new(
            "features",
            "no clips produced; recordings shorter than one clip?",
        ));
    }

    save_feature_rows(&args.out, &rows)?;
    // Params sidecar: what every image in this directory was computed with.
    let sidecar = json!({
        "feature_params": params,
        "encoding": args.encoding,
        "format": args.format,
        "clip_seconds": args.clip_seconds,
        "target_rate": args.target_rate,
        "trim_seconds": args.trim_seconds,
        "peak": args.peak,
    });
    std::fs::write(
        args.out.join("feature_params.json"),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    write_run_config(&args.out, "featurize", &args)?;
    print_summary(&json!({
        "command": "featurize",
        "records": entries.len(),
        "clips": rows.len(),
        "out": args.out,
    }));
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<(), CliError> {
    let entries = load_manifest(&args.manifest)?;
    ensure_out_dir(&args.out)?;
    let spec = SplitSpec {
        train_fraction: args.train_fraction,
        seed: args.seed,
        balance: args.balance || args.pool_size.is_some(),
        pool_size_per_class: args.pool_size,
    };
    let (train_subjects, eval_subjects) = stratified_subject_split(&entries, &spec)?;

    let manifest_dir = args
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .canonicalize()
        .map_err(|e| CliError::new("io", e.to_string()))?;
    let rebase = |mut rows: Vec<RecordEntry>| {
        for r in &mut rows {
            r.audio_path = manifest_dir.join(&r.audio_path).display().to_string();
        }
        rows
    };
    let train_rows = rebase(filter_by_subjects(&entries, &train_subjects));
    let eval_rows = rebase(filter_by_subjects(&entries, &eval_subjects));
    save_manifest(&train_rows, &args.out.join("train_manifest.jsonl"))?;
    save_manifest(&eval_rows, &args.out.join("eval_manifest.jsonl"))?;
    std::fs::write(
        args.out.join("split.json"),
        serde_json::to_string_pretty(&json!({
            "train_subjects": train_subjects,
            "eval_subjects": eval_subjects,
        }))? + "\n",
    )?;
    write_run_config(&args.out, "split", &args)?;
    print_summary(&json!({
        "command": "split",
        "train_subjects": train_subjects.len(),
        "eval_subjects": eval_subjects.len(),
        "train_records": train_rows.len(),
        "eval_records": eval_rows.len(),
    }));
    Ok(())
}

fn parse_lora_targets(text: &str) -> Result<BTreeSet<LoraTarget>, CliError> {
    let mut targets = BTreeSet::new();
    for part in text.split(',') {
        let target = match part.trim() {
            "qkv" => LoraTarget::AttentionQkv,
            "out" => LoraTarget::AttentionOut,
            "fc1" => LoraTarget::MlpFc1,
            "fc2" => LoraTarget::MlpFc2,
            "patch" => LoraTarget::PatchProjection,
            other => {
                return Err(CliError::usage(format!(
                    "unknown LoRA target `{other}` (expected qkv,out,fc1,fc2,patch)"
                )))
            }
        };
        targets.insert(target);
    }
    Ok(targets)
}

/// Splits rows into train/val at the subject level so no subject leaks
/// across the boundary.
fn subject_holdout(
    rows: &[FeatureRow],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<FeatureRow>, Vec<FeatureRow>), CliError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CliError::usage(format!(
            "--val-fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut subjects: Vec<&str> = rows
        .iter()
        .map(|r| r.subject_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if subjects.len() < 2 {
        return Err(CliError::new(
            "features",
            "need at least two subjects for a validation holdout",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76616c5f686f6c64); // "val_hold"
    subjects.shuffle(&mut rng);
    let n_val = ((subjects.len() as f64 * val_fraction).round() as usize)
        .clamp(1, subjects.len() - 1);
    let val_set: BTreeSet<&str> = subjects[..n_val].iter().copied().collect();
    let (val, tr): (Vec<FeatureRow>, Vec<FeatureRow>) = rows
        .iter()
        .cloned()
        .partition(|r| val_set.contains(r.subject_id.as_str()));
    Ok((tr, val))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let rows = load_feature_rows(&args.features)?;
    let (train_rows, val_rows) = match &args.val_features {
        Some(dir) => (rows, load_feature_rows(dir)?),
        None => subject_holdout(&rows, args.val_fraction, args.seed)?,
    };

    let train_set = load_labeled_images(&args.features, &train_rows)?;
    let val_dir = args.val_features.as_deref().unwrap_or(&args.features);
    let val_set = load_labeled_images(val_dir, &val_rows)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::new("features", "empty train or validation set"));
    }
    let (input_h, input_w) = (train_set[0].0.height, train_set[0].0.width);

    let mut model = match &args.init_checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let cfg = AstConfig {
                patch_h: args.patch_h.unwrap_or(args.patch),
                patch_w: args.patch_w.unwrap_or(args.patch),
                stride: args.stride,
                embed_dim: args.embed_dim,
                n_heads: args.heads,
                n_layers: args.layers,
                mlp_ratio: args.mlp_ratio,
                n_classes: 2,
                input_h,
                input_w,
            };
            AstModel::new(cfg, args.seed)?
        }
    };
    if let Some(rank) = args.lora_rank {
        model.apply_lora(
            LoraSpec {
                rank,
                alpha: args.lora_alpha,
                targets: parse_lora_targets(&args.lora_targets)?,
            },
            args.seed ^ 0x6c6f7261, // "lora"
        )?;
    }

    let tc = TrainConfig {
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        grad_clip_norm: args.grad_clip,
        warmup_steps: args.warmup,
        schedule: match args.schedule {
            ScheduleArg::Cosine => Schedule::Cosine,
            ScheduleArg::Constant => Schedule::Constant,
        },
        max_epochs: args.epochs,
        early_stop_patience: args.patience,
        batch_size: args.batch_size,
        seed: args.seed,
    };

    let history = train(&mut model, &train_set, &val_set, &tc)?;

    ensure_out_dir(&args.out)?;
    save_checkpoint(&model, &args.out.join("model.ckpt"))?;
    std::fs::write(
        args.out.join("history.json"),
        serde_json::to_string_pretty(&history)? + "\n",
    )?;
    write_run_config(&args.out, "train", &args)?;
    let last = history.epochs.last().unwrap();
    print_summary(&json!({
        "command": "train",
        "epochs_run": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "final_val_accuracy": last.val_accuracy,
        "trainable_fraction": model.trainable_fraction(),
        "checkpoint": args.out.join("model.ckpt"),
    }));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let rows = load_feature_rows(&args.features)?;
    let set = load_labeled_images(&args.features, &rows)?;
    let model = load_checkpoint(&args.checkpoint)?;

    let stats = evaluate(&model, &set)?;
    let labels: Vec<bool> = rows.iter().map(|r| r.label == 1).collect();
    let preds: Vec<bool> = stats.predictions.iter().map(|&p| p == 1).collect();
    let scores: Vec<f64> = stats.probabilities.iter().map(|p| p[1]).collect();

    let counts = confusion(&labels, &preds)?;
    let mut report = respscreen_core::metrics::summarize(counts)?;
    let auc = roc_auc(&labels, &scores)?;
    report.roc_auc = Some(auc);
    let youden = youden_optimal_point(&labels, &scores)?;
    let preds_at_youden: Vec<bool> = scores.iter().map(|&s| s >= youden.threshold).collect();
    let mut report_youden =
        respscreen_core::metrics::summarize(confusion(&labels, &preds_at_youden)?)?;
    report_youden.roc_auc = Some(auc);

    ensure_out_dir(&args.out)?;
    let mut csv = String::from("fpr,tpr,threshold\n");
    for p in roc_points(&labels, &scores)? {
        csv.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    std::fs::write(args.out.join("roc.csv"), csv)?;

    let mut predictions = String::new();
    for (row, (pred, score)) in rows.iter().zip(stats.predictions.iter().zip(&scores)) {
        predictions.push_str(&serde_json::to_string(&json!({
            "record_id": row.record_id,
            "clip_index": row.clip_index,
            "label": row.label,
            "predicted": pred,
            "prob_asthma": score,
        }))?);
        predictions.push('\n');
    }
    std::fs::write(args.out.join("predictions.jsonl"), predictions)?;

    // Two labeled operating points: the argmax decision rule, and the
    // Youden-optimal point on the ROC curve.
    let metrics_doc = json!({
        "n_clips": rows.len(),
        "report_argmax": report,
        "report_youden": report_youden,
        "youden_point": youden,
        "mean_loss": stats.loss,
    });
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics_doc)? + "\n",
    )?;
    write_run_config(&args.out, "eval", &args)?;
    print_summary(&json!({
        "command": "eval",
        "n_clips": rows.len(),
        "accuracy": report.accuracy,
        "roc_auc": auc,
        "f1": report.f1,
        "metrics": args.out.join("metrics.json"),
    }));
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.checkpoint)?;
    let img = read_image(&args.image)?;
    let probs = model.predict(&img)?;
    let predicted = if probs[1] > probs[0] { 1 } else { 0 };
    print_summary(&json!({
        "command": "infer",
        "image": args.image,
        "probabilities": {"not_asthma": probs[0], "asthma": probs[1]},
        "predicted_label": predicted,
        "predicted": if predicted == 1 { "asthma" } else { "not_asthma" },
    }));
    Ok(())
}

fn cmd_attention(args: AttentionArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.checkpoint)?;
    let img = read_image(&args.image)?;
    let (_, attns) = model.forward(&img)?;
    let layer = args.layer.unwrap_or(attns.len() - 1);
    let map = class_attention_map(&attns, layer, &model.cfg)?;

    ensure_out_dir(&args.out)?;
    let mut csv = String::new();
    for gy in 0..map.gh {
        let row: Vec<String> = (0..map.gw)
            .map(|gx| map.grid[gy * map.gw + gx].to_string())
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(args.out.join("attention.csv"), csv)?;

    // Grayscale heatmap, upscaled for visibility (max weight -> white).
    let scale = args.scale.max(1);
    let peak = map.grid.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let (h, w) = (map.gh * scale, map.gw * scale);
    let mut pixels = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let v = map.grid[(y / scale) * map.gw + (x / scale)] / peak;
            let b = (v * 255.0).round() as u8;
            let at = (y * w + x) * 3;
            pixels[at] = b;
            pixels[at + 1] = b;
            pixels[at + 2] = b;
        }
    }
    // Row 0 of the grid is the lowest patch row; write_image flips so the
    // PNG shows it at the bottom, matching the spectrogram orientation.
    let heat = RgbSpectrogramImage {
        height: h,
        width: w,
        pixels: PixelData::Byte(pixels),
    };
    write_image(&heat, &args.out.join("attention.png"), ImageFileFormat::Png)?;
    write_run_config(&args.out, "attention", &args)?;
    print_summary(&json!({
        "command": "attention",
        "layer": layer,
        "grid": [map.gh, map.gw],
        "out": args.out,
    }));
    Ok(())
}

fn cmd_prompt(args: PromptArgs) -> Result<(), CliError> {
    let entries = load_manifest(&args.manifest)?;
    let entry = entries
        .iter()
        .find(|e| e.record_id == args.record_id)
        .ok_or_else(|| {
            CliError::new(
                "manifest",
                format!("record `{}` not found in manifest", args.record_id),
            )
        })?;
    let spec = PromptSpec {
        include_demographics: !args.no_demographics,
        include_technical: !args.no_technical,
        technical_params: feature_params(
            &args.windows,
            args.hop_ms,
            args.n_mels,
            args.fmin,
            args.fmax,
        )?,
        ..PromptSpec::default()
    };
    let patient = PatientMetadata {
        sex: entry.sex,
        age_years: entry.age_years,
        recording_point: entry.recording_point,
    };
    println!("{}", build_prompt(&spec, &patient)?);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut rows = load_feature_rows(&args.features)?;
    if let Some(cap) = args.max_items {
        rows.truncate(cap.max(1));
    }

    let mut items = Vec::with_capacity(rows.len());
    for row in &rows {
        let path = args.features.join(&row.image_path);
        let image_png = std::fs::read(&path)
            .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
        items.push(AblationItem {
            item_id: format!("{}:c{:02}", row.record_id, row.clip_index),
            patient: PatientMetadata {
                sex: row.sex,
                age_years: row.age_years,
                recording_point: row.recording_point,
            },
            image_png,
            asthma: row.label == 1,
        });
    }

    let mut specs = vec![AblationSpec {
        name: "full".into(),
        prompt: PromptSpec::default(),
    }];
    match args.ablate {
        AblateVariant::Demographics => specs.push(AblationSpec {
            name: "no_demographics".into(),
            prompt: PromptSpec {
                include_demographics: false,
                ..PromptSpec::default()
            },
        }),
        AblateVariant::Technical => specs.push(AblationSpec {
            name: "no_technical".into(),
            prompt: PromptSpec {
                include_technical: false,
                ..PromptSpec::default()
            },
        }),
        AblateVariant::None => {}
    }

    let http_backend: Option<HttpBackend> = match &args.backend_url {
        Some(url) => Some(HttpBackend::new(url, args.timeout, args.retries)?),
        None => None,
    };
    let mock_backend = {
        let mut mock = DemographicsGatedMock::new();
        for item in &items {
            mock.set_truth(&item.image_png, item.asthma);
        }
        mock
    };
    let backend: &dyn InferenceBackend = match &http_backend {
        Some(b) => b,
        None => &mock_backend,
    };

    let results = run_ablation(&items, &specs, backend)?;

    ensure_out_dir(&args.out)?;
    for result in &results {
        let mut log = String::new();
        for entry in &result.log {
            log.push_str(&serde_json::to_string(entry)?);
            log.push('\n');
        }
        std::fs::write(args.out.join(format!("runlog_{}.jsonl", result.name)), log)?;
    }
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&results)? + "\n",
    )?;
    write_run_config(&args.out, "ablate", &args)?;

    let summary: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            json!({
                "name": r.name,
                "accuracy": r.metrics.accuracy,
                "fn": r.metrics.counts.fn_,
                "invalid": r.n_invalid,
                "backend_errors": r.n_backend_errors,
            })
        })
        .collect();
    print_summary(&json!({
        "command": "ablate",
        "items": items.len(),
        "variants": summary,
        "out": args.out,
    }));
    Ok(())
}

//! Benchmarks for the pipeline's hot paths: the three-window feature
//! extraction, a transformer forward pass, one training gradient step, and
//! the rank-based ROC AUC.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use respscreen_core::ast::{patchify, AstModel};
use respscreen_core::features::{multiwindow_rgb, Encoding, FeatureParams, PixelData};
use respscreen_core::ingest::Clip;
use respscreen_core::metrics::roc_auc;
use respscreen_core::{AstConfig, RgbSpectrogramImage};

/// Five seconds of noise at 16 kHz, the shape `featurize` works on.
fn sample_clip() -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rate = 16_000u32;
    let samples: Vec<f32> = (0..5 * rate).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    Clip {
        samples,
        sample_rate: rate,
        parent_id: "bench".into(),
        start_offset_s: 0.0,
    }
}

fn training_image(cfg: &AstConfig, seed: u64) -> RgbSpectrogramImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.input_h * cfg.input_w * 3;
    RgbSpectrogramImage {
        height: cfg.input_h,
        width: cfg.input_w,
        pixels: PixelData::Unit((0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect()),
    }
}

fn bench_features(c: &mut Criterion) {
    let clip = sample_clip();
    let params = FeatureParams::default();
    c.bench_function("multiwindow_rgb 5s@16k 128mel", |b| {
        b.iter(|| multiwindow_rgb(&clip, &params, Encoding::Unit).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    // The geometry the CLI trains at: 483x128 image, 16x16 patches.
    let cfg = AstConfig {
        input_h: 128,
        input_w: 483,
        ..AstConfig::default()
    };
    let model = AstModel::new(cfg.clone(), 11).unwrap();
    let img = training_image(&cfg, 3);

    c.bench_function("patchify 483x128 p16", |b| {
        b.iter(|| patchify(&img, &cfg).unwrap())
    });
    c.bench_function("forward 483x128 d64 L2", |b| {
        b.iter(|| model.forward(&img).unwrap())
    });
    c.bench_function("loss_and_grads batch8 483x128", |b| {
        let batch: Vec<RgbSpectrogramImage> =
            (0..8).map(|i| training_image(&cfg, 20 + i)).collect();
        let refs: Vec<(&RgbSpectrogramImage, usize)> = batch
            .iter()
            .enumerate()
            .map(|(i, im)| (im, i % 2))
            .collect();
        b.iter(|| model.loss_and_grads(&refs).unwrap())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    c.bench_function("roc_auc 10k", |b| {
        b.iter_batched(
            || (labels.clone(), scores.clone()),
            |(l, s)| roc_auc(&l, &s).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_features, bench_model, bench_metrics
}
criterion_main!(benches);

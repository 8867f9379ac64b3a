//! From-scratch toy-scale Audio Spectrogram Transformer.
//!
//! Patch embedding, class token, learnable positional embeddings, pre-norm
//! encoder blocks (multi-head attention + GELU MLP), a linear classifier
//! head, manual backpropagation, AdamW training with warmup/cosine schedule
//! and early stopping, LoRA adapters, attention-map extraction, and versioned
//! checkpoints. All math is f64; everything is deterministic given seeds.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::RgbSpectrogramImage;

/// Errors raised by model construction, training, and checkpointing.
#[derive(Debug, Error)]
pub enum AstError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AstConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// MLP hidden size = `mlp_ratio * embed_dim`.
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl Default for AstConfig {
    fn default() -> Self {
        Self {
            patch_h: 16,
            patch_w: 16,
            stride: 16,
            embed_dim: 64,
            n_heads: 4,
            n_layers: 2,
            mlp_ratio: 4,
            n_classes: 2,
            input_h: 128,
            input_w: 128,
        }
    }
}

impl AstConfig {
    pub fn validate(&self) -> Result<(), AstError> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(AstError::InvalidParameter(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.stride == 0 {
            return Err(AstError::InvalidParameter("stride must be >= 1".into()));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(AstError::InvalidParameter("patch dims must be >= 1".into()));
        }
        if self.patch_h > self.input_h || self.patch_w > self.input_w {
            return Err(AstError::InvalidParameter(format!(
                "patch {}x{} exceeds input {}x{}",
                self.patch_h, self.patch_w, self.input_h, self.input_w
            )));
        }
        if self.n_layers == 0 || self.mlp_ratio == 0 || self.n_classes < 2 {
            return Err(AstError::InvalidParameter(
                "need n_layers >= 1, mlp_ratio >= 1, n_classes >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Patch grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        let gh = (self.input_h - self.patch_h) / self.stride + 1;
        let gw = (self.input_w - self.patch_w) / self.stride + 1;
        (gh, gw)
    }

    pub fn n_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Flattened patch length (3 channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * 3
    }

    /// Token-sequence length (patches + class token).
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}

/// Linear maps that can host LoRA adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    AttentionQkv,
    AttentionOut,
    MlpFc1,
    MlpFc2,
    PatchProjection,
}

/// Low-rank adapter specification: every selected map gains
/// `y = base(x) + (alpha/rank)·B(A(x))` with `B` zero-initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<LoraTarget>,
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (layer-norm parameters and the
    /// class token are excluded by convention).
    pub decay: bool,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AdapterIdx {
    target: LoraTarget,
    /// None for the patch projection, which exists once.
    layer: Option<usize>,
    a: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct ParamIndex {
    patch_w: usize,
    patch_b: usize,
    class_token: usize,
    pos_embed: usize,
    blocks: Vec<BlockIdx>,
    final_ln_g: usize,
    final_ln_b: usize,
    head_w: usize,
    head_b: usize,
    adapters: Vec<AdapterIdx>,
}

/// The model: a flat list of named parameters plus the index describing the
/// architecture wiring. Parameter order is canonical and stable.
#[derive(Debug, Clone)]
pub struct AstModel {
    pub cfg: AstConfig,
    params: Vec<Param>,
    lora: Option<LoraSpec>,
    idx: ParamIndex,
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

/// Full training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Learning-rate schedule applied after linear warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            warmup_steps: 50,
            schedule: Schedule::Cosine,
            max_epochs: 20,
            early_stop_patience: 3,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AstError> {
        if self.learning_rate <= 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(AstError::InvalidParameter(
                "learning rate and clip norm must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(AstError::InvalidParameter(
                "weight decay must be nonnegative".into(),
            ));
        }
        if self.early_stop_patience == 0 {
            return Err(AstError::InvalidParameter("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(AstError::InvalidParameter(
                "batch size and max epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Class-token attention distribution over the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// Row-major `[gh × gw]`, sums to 1.
    pub grid: Vec<f64>,
    pub gh: usize,
    pub gw: usize,
    pub source_layer: usize,
}

/// Loss, prediction stats, and per-parameter gradients for one batch.
#[derive(Debug)]
pub struct BatchGrads {
    pub loss: f64,
    pub correct: usize,
    /// Aligned with the model's parameter list; frozen entries are all-zero.
    pub grads: Vec<Vec<f64>>,
}

/// Evaluation result over a labeled set.
#[derive(Debug, Clone)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Per-item softmax class probabilities.
    pub probabilities: Vec<Vec<f64>>,
}

/// Fixed chunk count for parallel batch reduction; summation happens in chunk
/// order, so results are independent of thread count.
const GRAD_CHUNKS: usize = 8;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const LN_EPS: f64 = 1e-5;

/// Cuts the image into flattened patches in row-major grid order.
///
/// Returns the patch matrix `[n_patches × patch_dim]` and the grid dims.
/// Patch values are on the unit scale (byte pixels divided by 255).
pub fn patchify(
    img: &RgbSpectrogramImage,
    cfg: &AstConfig,
) -> Result<(Vec<f64>, usize, usize), AstError> {
    if img.height < cfg.patch_h || img.width < cfg.patch_w {
        return Err(AstError::InvalidParameter(format!(
            "image {}x{} smaller than patch {}x{}",
            img.height, img.width, cfg.patch_h, cfg.patch_w
        )));
    }
    let gh = (img.height - cfg.patch_h) / cfg.stride + 1;
    let gw = (img.width - cfg.patch_w) / cfg.stride + 1;
    let pd = cfg.patch_dim();
    let mut patches = vec![0.0f64; gh * gw * pd];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * pd;
            for pr in 0..cfg.patch_h {
                for pc in 0..cfg.patch_w {
                    for ch in 0..3 {
                        patches[base + (pr * cfg.patch_w + pc) * 3 + ch] =
                            img.value(gy * cfg.stride + pr, gx * cfg.stride + pc, ch);
                    }
                }
            }
        }
    }
    Ok((patches, gh, gw))
}

/// Shifts and scales values to zero mean and unit variance (in place).
///
/// The forward pass applies this to the patch matrix so the encoder sees a
/// centered input regardless of how bright the source image is; a constant
/// input maps to all zeros.
fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = 1.0 / var.sqrt().max(1e-12);
    for v in values.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

/// Xavier/Glorot normal std for a linear map `fan_in -> fan_out`.
fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

fn normal_init(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl AstModel {
    /// Builds a freshly initialized model. Weight matrices are Xavier-scaled
    /// normal (std = sqrt(2/(fan_in+fan_out))); the class token and positional
    /// embeddings are N(0, 0.1²); biases zero; layer-norm gains one; the
    /// classifier head starts at zero so a fresh model emits uniform logits.
    pub fn new(cfg: AstConfig, seed: u64) -> Result<Self, AstError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let pd = cfg.patch_dim();
        let s = cfg.seq_len();
        let hidden = cfg.mlp_hidden();

        let mut params = Vec::new();
        let push = |params: &mut Vec<Param>,
                        name: String,
                        shape: Vec<usize>,
                        values: Vec<f64>,
                        decay: bool|
         -> usize {
            debug_assert_eq!(shape.iter().product::<usize>(), values.len());
            params.push(Param {
                name,
                shape,
                values,
                trainable: true,
                decay,
            });
            params.len() - 1
        };

        let patch_w = push(
            &mut params,
            "patch.w".into(),
            vec![d, pd],
            normal_init(&mut rng, d * pd, xavier_std(pd, d)),
            true,
        );
        let patch_b = push(&mut params, "patch.b".into(), vec![d], vec![0.0; d], true);
        let class_token = push(
            &mut params,
            "class_token".into(),
            vec![d],
            normal_init(&mut rng, d, 0.1),
            false,
        );
        let pos_embed = push(
            &mut params,
            "pos_embed".into(),
            vec![s, d],
            normal_init(&mut rng, s * d, 0.1),
            true,
        );

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let ln1_g = push(
                &mut params,
                format!("block{l}.ln1.g"),
                vec![d],
                vec![1.0; d],
                false,
            );
            let ln1_b = push(
                &mut params,
                format!("block{l}.ln1.b"),
                vec![d],
                vec![0.0; d],
                false,
            );
            let qkv_w = push(
                &mut params,
                format!("block{l}.qkv.w"),
                vec![3 * d, d],
                normal_init(&mut rng, 3 * d * d, xavier_std(d, d)),
                true,
            );
            let qkv_b = push(
                &mut params,
                format!("block{l}.qkv.b"),
                vec![3 * d],
                vec![0.0; 3 * d],
                true,
            );
            let out_w = push(
                &mut params,
                format!("block{l}.out.w"),
                vec![d, d],
                normal_init(&mut rng, d * d, xavier_std(d, d)),
                true,
            );
            let out_b = push(
                &mut params,
                format!("block{l}.out.b"),
                vec![d],
                vec![0.0; d],
                true,
            );
            let ln2_g = push(
                &mut params,
                format!("block{l}.ln2.g"),
                vec![d],
                vec![1.0; d],
                false,
            );
            let ln2_b = push(
                &mut params,
                format!("block{l}.ln2.b"),
                vec![d],
                vec![0.0; d],
                false,
            );
            let fc1_w = push(
                &mut params,
                format!("block{l}.fc1.w"),
                vec![hidden, d],
                normal_init(&mut rng, hidden * d, xavier_std(d, hidden)),
                true,
            );
            let fc1_b = push(
                &mut params,
                format!("block{l}.fc1.b"),
                vec![hidden],
                vec![0.0; hidden],
                true,
            );
            let fc2_w = push(
                &mut params,
                format!("block{l}.fc2.w"),
                vec![d, hidden],
                normal_init(&mut rng, d * hidden, xavier_std(hidden, d)),
                true,
            );
            let fc2_b = push(
                &mut params,
                format!("block{l}.fc2.b"),
                vec![d],
                vec![0.0; d],
                true,
            );
            blocks.push(BlockIdx {
                ln1_g,
                ln1_b,
                qkv_w,
                qkv_b,
                out_w,
                out_b,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }

        let final_ln_g = push(
            &mut params,
            "final_ln.g".into(),
            vec![d],
            vec![1.0; d],
            false,
        );
        let final_ln_b = push(
            &mut params,
            "final_ln.b".into(),
            vec![d],
            vec![0.0; d],
            false,
        );
        let head_w = push(
            &mut params,
            "head.w".into(),
            vec![cfg.n_classes, d],
            vec![0.0; cfg.n_classes * d],
            true,
        );
        let head_b = push(
            &mut params,
            "head.b".into(),
            vec![cfg.n_classes],
            vec![0.0; cfg.n_classes],
            true,
        );

        Ok(Self {
            cfg,
            params,
            lora: None,
            idx: ParamIndex {
                patch_w,
                patch_b,
                class_token,
                pos_embed,
                blocks,
                final_ln_g,
                final_ln_b,
                head_w,
                head_b,
                adapters: Vec::new(),
            },
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn lora_spec(&self) -> Option<&LoraSpec> {
        self.lora.as_ref()
    }

    pub fn total_param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Fraction of parameters currently marked trainable.
    pub fn trainable_fraction(&self) -> f64 {
        let trainable: usize = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.values.len())
            .sum();
        trainable as f64 / self.total_param_count() as f64
    }

    /// Injects LoRA adapters into the selected linear maps and freezes all
    /// base parameters except the classifier head, class token, and
    /// positional embeddings.
    ///
    /// Adapter `A` ([rank × d_in]) is N(0, 0.02²); `B` ([d_out × rank]) is
    /// zero, so the wrapped model initially computes exactly the base output.
    pub fn apply_lora(&mut self, spec: LoraSpec, seed: u64) -> Result<(), AstError> {
        if self.lora.is_some() {
            return Err(AstError::InvalidParameter(
                "model already has LoRA adapters".into(),
            ));
        }
        if spec.rank == 0 {
            return Err(AstError::InvalidParameter("LoRA rank must be >= 1".into()));
        }
        if spec.targets.is_empty() {
            return Err(AstError::InvalidParameter(
                "LoRA target set matches no module".into(),
            ));
        }

        for p in &mut self.params {
            p.trainable = false;
        }
        self.params[self.idx.head_w].trainable = true;
        self.params[self.idx.head_b].trainable = true;
        self.params[self.idx.class_token].trainable = true;
        self.params[self.idx.pos_embed].trainable = true;

        let d = self.cfg.embed_dim;
        let sites: &[(LoraTarget, usize, usize)] = &[
            (LoraTarget::AttentionQkv, d, 3 * d),
            (LoraTarget::AttentionOut, d, d),
            (LoraTarget::MlpFc1, d, self.cfg.mlp_hidden()),
            (LoraTarget::MlpFc2, self.cfg.mlp_hidden(), d),
            (LoraTarget::PatchProjection, self.cfg.patch_dim(), d),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(target, d_in, d_out) in sites {
            if !spec.targets.contains(&target) {
                continue;
            }
            let layers: Vec<Option<usize>> = if target == LoraTarget::PatchProjection {
                vec![None]
            } else {
                (0..self.cfg.n_layers).map(Some).collect()
            };
            for layer in layers {
                let tag = match layer {
                    Some(l) => format!("{l}"),
                    None => "global".into(),
                };
                let name = serde_json::to_value(target).unwrap();
                let name = name.as_str().unwrap();
                self.params.push(Param {
                    name: format!("lora.{name}.{tag}.a"),
                    shape: vec![spec.rank, d_in],
                    values: normal_init(&mut rng, spec.rank * d_in, 0.02),
                    trainable: true,
                    decay: true,
                });
                let a = self.params.len() - 1;
                self.params.push(Param {
                    name: format!("lora.{name}.{tag}.b"),
                    shape: vec![d_out, spec.rank],
                    values: vec![0.0; d_out * spec.rank],
                    trainable: true,
                    decay: true,
                });
                let b = self.params.len() - 1;
                self.idx.adapters.push(AdapterIdx {
                    target,
                    layer,
                    a,
                    b,
                });
            }
        }

        self.lora = Some(spec);
        Ok(())
    }

    fn adapter_for(&self, target: LoraTarget, layer: Option<usize>) -> Option<&AdapterIdx> {
        self.idx
            .adapters
            .iter()
            .find(|a| a.target == target && a.layer == layer)
    }

    fn lora_scale(&self) -> f64 {
        self.lora
            .as_ref()
            .map(|s| s.alpha / s.rank as f64)
            .unwrap_or(0.0)
    }
}

/// `out[t, :] = W · x[t, :] + b` for row-major `W: [d_out × d_in]`.
fn linear_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n_rows: usize,
    d_in: usize,
    d_out: usize,
    out: &mut [f64],
) {
    for t in 0..n_rows {
        let xi = &x[t * d_in..(t + 1) * d_in];
        let oi = &mut out[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            let row = &w[o * d_in..(o + 1) * d_in];
            let mut acc = b[o];
            for i in 0..d_in {
                acc += row[i] * xi[i];
            }
            oi[o] = acc;
        }
    }
}

/// Backward of [`linear_forward`]: accumulates `dx += Wᵀ·dy` (when requested)
/// and, unless the map is frozen, `dw += dyᵀ⊗x`, `db += Σ dy`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n_rows: usize,
    d_in: usize,
    d_out: usize,
    dx: Option<&mut [f64]>,
    dw_db: Option<(&mut [f64], &mut [f64])>,
) {
    if let Some(dx) = dx {
        for t in 0..n_rows {
            let dyi = &dy[t * d_out..(t + 1) * d_out];
            let dxi = &mut dx[t * d_in..(t + 1) * d_in];
            for o in 0..d_out {
                let g = dyi[o];
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * d_in..(o + 1) * d_in];
                for i in 0..d_in {
                    dxi[i] += row[i] * g;
                }
            }
        }
    }
    if let Some((dw, db)) = dw_db {
        for t in 0..n_rows {
            let xi = &x[t * d_in..(t + 1) * d_in];
            let dyi = &dy[t * d_out..(t + 1) * d_out];
            for o in 0..d_out {
                let g = dyi[o];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let row = &mut dw[o * d_in..(o + 1) * d_in];
                for i in 0..d_in {
                    row[i] += g * xi[i];
                }
            }
        }
    }
}

struct LnCache {
    /// 1/σ per token.
    rstd: Vec<f64>,
    /// Normalized activations x̂, token-major.
    normed: Vec<f64>,
}

fn layer_norm_forward(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    n_rows: usize,
    d: usize,
    out: &mut [f64],
) -> LnCache {
    let mut rstd = vec![0.0f64; n_rows];
    let mut normed = vec![0.0f64; n_rows * d];
    for t in 0..n_rows {
        let xi = &x[t * d..(t + 1) * d];
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        let ni = &mut normed[t * d..(t + 1) * d];
        let oi = &mut out[t * d..(t + 1) * d];
        for i in 0..d {
            let n = (xi[i] - mean) * r;
            ni[i] = n;
            oi[i] = g[i] * n + b[i];
        }
    }
    LnCache { rstd, normed }
}

/// Backward of layer norm; accumulates into `dx`, and into `dg`/`db` when the
/// parameters are trainable.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    cache: &LnCache,
    g: &[f64],
    dy: &[f64],
    n_rows: usize,
    d: usize,
    dx: &mut [f64],
    dg_db: Option<(&mut [f64], &mut [f64])>,
) {
    let mut dg_local: Option<(&mut [f64], &mut [f64])> = dg_db;
    for t in 0..n_rows {
        let dyi = &dy[t * d..(t + 1) * d];
        let ni = &cache.normed[t * d..(t + 1) * d];
        if let Some((dg, db)) = dg_local.as_mut() {
            for i in 0..d {
                dg[i] += dyi[i] * ni[i];
                db[i] += dyi[i];
            }
        }
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        for i in 0..d {
            let dn = dyi[i] * g[i];
            sum_dn += dn;
            sum_dn_n += dn * ni[i];
        }
        let mean_dn = sum_dn / d as f64;
        let mean_dn_n = sum_dn_n / d as f64;
        let r = cache.rstd[t];
        let dxi = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            let dn = dyi[i] * g[i];
            dxi[i] += r * (dn - mean_dn - ni[i] * mean_dn_n);
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Cached adapter activation for one LoRA site: `u = A·x` per token.
struct AdapterCache {
    u: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    /// `[n_heads × S × S]` softmax rows.
    attn: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc1_act: Vec<f64>,
    qkv_adapter: Option<AdapterCache>,
    out_adapter: Option<AdapterCache>,
    fc1_adapter: Option<AdapterCache>,
    fc2_adapter: Option<AdapterCache>,
}

struct ForwardPass {
    patches: Vec<f64>,
    patch_adapter: Option<AdapterCache>,
    blocks: Vec<BlockCache>,
    /// Residual-stream value entering the final layer norm (class row only).
    final_ln: LnCache,
    class_final: Vec<f64>,
    logits: Vec<f64>,
}

impl AstModel {
    fn check_image(&self, img: &RgbSpectrogramImage) -> Result<(), AstError> {
        if img.height != self.cfg.input_h || img.width != self.cfg.input_w {
            return Err(AstError::InvalidParameter(format!(
                "image {}x{} does not match configured input {}x{}",
                img.height, img.width, self.cfg.input_h, self.cfg.input_w
            )));
        }
        Ok(())
    }

    /// Adds the adapter contribution `(alpha/rank)·B(A(x))` for a site, if an
    /// adapter is attached there, caching `u = A·x` for the backward pass.
    #[allow(clippy::too_many_arguments)]
    fn adapter_forward(
        &self,
        target: LoraTarget,
        layer: Option<usize>,
        x: &[f64],
        n_rows: usize,
        d_in: usize,
        d_out: usize,
        out: &mut [f64],
    ) -> Option<AdapterCache> {
        let adapter = self.adapter_for(target, layer)?;
        let rank = self.lora.as_ref().unwrap().rank;
        let scale = self.lora_scale();
        let a = &self.params[adapter.a].values;
        let b = &self.params[adapter.b].values;

        let mut u = vec![0.0f64; n_rows * rank];
        let zero_bias_a = vec![0.0f64; rank];
        linear_forward(x, a, &zero_bias_a, n_rows, d_in, rank, &mut u);
        for t in 0..n_rows {
            let ui = &u[t * rank..(t + 1) * rank];
            let oi = &mut out[t * d_out..(t + 1) * d_out];
            for o in 0..d_out {
                let row = &b[o * rank..(o + 1) * rank];
                let mut acc = 0.0;
                for r in 0..rank {
                    acc += row[r] * ui[r];
                }
                oi[o] += scale * acc;
            }
        }
        Some(AdapterCache { u })
    }

    /// Backward through a LoRA site: accumulates `dA`, `dB`, and `dx`.
    #[allow(clippy::too_many_arguments)]
    fn adapter_backward(
        &self,
        target: LoraTarget,
        layer: Option<usize>,
        cache: &Option<AdapterCache>,
        x: &[f64],
        dy: &[f64],
        n_rows: usize,
        d_in: usize,
        d_out: usize,
        dx: &mut [f64],
        grads: &mut [Vec<f64>],
    ) {
        let (adapter, cache) = match (self.adapter_for(target, layer), cache) {
            (Some(a), Some(c)) => (a, c),
            _ => return,
        };
        let rank = self.lora.as_ref().unwrap().rank;
        let scale = self.lora_scale();
        let a = &self.params[adapter.a].values;
        let b = &self.params[adapter.b].values;
        let a_trainable = self.params[adapter.a].trainable;
        let b_trainable = self.params[adapter.b].trainable;

        // du = scale · Bᵀ · dy ; dB += scale · dy ⊗ u
        let mut du = vec![0.0f64; n_rows * rank];
        for t in 0..n_rows {
            let dyi = &dy[t * d_out..(t + 1) * d_out];
            let ui = &cache.u[t * rank..(t + 1) * rank];
            let dui = &mut du[t * rank..(t + 1) * rank];
            for o in 0..d_out {
                let g = dyi[o];
                if g == 0.0 {
                    continue;
                }
                let row = &b[o * rank..(o + 1) * rank];
                if b_trainable {
                    let db = &mut grads[adapter.b][o * rank..(o + 1) * rank];
                    for r in 0..rank {
                        db[r] += scale * g * ui[r];
                    }
                }
                for r in 0..rank {
                    dui[r] += scale * row[r] * g;
                }
            }
        }
        // dA += du ⊗ x ; dx += Aᵀ · du
        for t in 0..n_rows {
            let dui = &du[t * rank..(t + 1) * rank];
            let xi = &x[t * d_in..(t + 1) * d_in];
            let dxi = &mut dx[t * d_in..(t + 1) * d_in];
            for r in 0..rank {
                let g = dui[r];
                if g == 0.0 {
                    continue;
                }
                let row = &a[r * d_in..(r + 1) * d_in];
                if a_trainable {
                    let da = &mut grads[adapter.a][r * d_in..(r + 1) * d_in];
                    for i in 0..d_in {
                        da[i] += g * xi[i];
                    }
                }
                for i in 0..d_in {
                    dxi[i] += row[i] * g;
                }
            }
        }
    }

    fn forward_pass(&self, img: &RgbSpectrogramImage) -> Result<ForwardPass, AstError> {
        self.check_image(img)?;
        let cfg = &self.cfg;
        let (mut patches, _, _) = patchify(img, cfg)?;
        standardize(&mut patches);
        let d = cfg.embed_dim;
        let s = cfg.seq_len();
        let np = cfg.n_patches();
        let pd = cfg.patch_dim();
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let hidden = cfg.mlp_hidden();
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let idx = &self.idx;

        // Embed: class token, then projected patches, plus positions.
        let mut x = vec![0.0f64; s * d];
        x[..d].copy_from_slice(&p[idx.class_token].values);
        linear_forward(
            &patches,
            &p[idx.patch_w].values,
            &p[idx.patch_b].values,
            np,
            pd,
            d,
            &mut x[d..],
        );
        let patch_adapter = self.adapter_forward(
            LoraTarget::PatchProjection,
            None,
            &patches,
            np,
            pd,
            d,
            &mut x[d..],
        );
        for (xi, pe) in x.iter_mut().zip(&p[idx.pos_embed].values) {
            *xi += pe;
        }

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for (l, b) in idx.blocks.iter().enumerate() {
            // Attention branch.
            let mut h1 = vec![0.0f64; s * d];
            let ln1 = layer_norm_forward(
                &x,
                &p[b.ln1_g].values,
                &p[b.ln1_b].values,
                s,
                d,
                &mut h1,
            );
            let mut qkv = vec![0.0f64; s * 3 * d];
            linear_forward(
                &h1,
                &p[b.qkv_w].values,
                &p[b.qkv_b].values,
                s,
                d,
                3 * d,
                &mut qkv,
            );
            let qkv_adapter =
                self.adapter_forward(LoraTarget::AttentionQkv, Some(l), &h1, s, d, 3 * d, &mut qkv);

            let mut attn = vec![0.0f64; heads * s * s];
            let mut ctx = vec![0.0f64; s * d];
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                let probs = &mut attn[h * s * s..(h + 1) * s * s];
                for i in 0..s {
                    let qi = &qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
                    let row = &mut probs[i * s..(i + 1) * s];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..s {
                        let kj = &qkv[j * 3 * d + ko..j * 3 * d + ko + dh];
                        let mut acc = 0.0;
                        for t in 0..dh {
                            acc += qi[t] * kj[t];
                        }
                        let sc = acc * scale;
                        row[j] = sc;
                        max = max.max(sc);
                    }
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                for i in 0..s {
                    let row = &probs[i * s..(i + 1) * s];
                    let ci = &mut ctx[i * d + h * dh..i * d + h * dh + dh];
                    for (j, &pj) in row.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vj = &qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                        for t in 0..dh {
                            ci[t] += pj * vj[t];
                        }
                    }
                }
            }

            let mut attn_out = vec![0.0f64; s * d];
            linear_forward(
                &ctx,
                &p[b.out_w].values,
                &p[b.out_b].values,
                s,
                d,
                d,
                &mut attn_out,
            );
            let out_adapter =
                self.adapter_forward(LoraTarget::AttentionOut, Some(l), &ctx, s, d, d, &mut attn_out);
            for (xi, ai) in x.iter_mut().zip(&attn_out) {
                *xi += ai;
            }

            // MLP branch.
            let mut h2 = vec![0.0f64; s * d];
            let ln2 = layer_norm_forward(
                &x,
                &p[b.ln2_g].values,
                &p[b.ln2_b].values,
                s,
                d,
                &mut h2,
            );
            let mut fc1_pre = vec![0.0f64; s * hidden];
            linear_forward(
                &h2,
                &p[b.fc1_w].values,
                &p[b.fc1_b].values,
                s,
                d,
                hidden,
                &mut fc1_pre,
            );
            let fc1_adapter =
                self.adapter_forward(LoraTarget::MlpFc1, Some(l), &h2, s, d, hidden, &mut fc1_pre);
            let fc1_act: Vec<f64> = fc1_pre.iter().map(|&v| gelu(v)).collect();
            let mut fc2_out = vec![0.0f64; s * d];
            linear_forward(
                &fc1_act,
                &p[b.fc2_w].values,
                &p[b.fc2_b].values,
                s,
                hidden,
                d,
                &mut fc2_out,
            );
            let fc2_adapter =
                self.adapter_forward(LoraTarget::MlpFc2, Some(l), &fc1_act, s, hidden, d, &mut fc2_out);
            for (xi, fi) in x.iter_mut().zip(&fc2_out) {
                *xi += fi;
            }

            blocks.push(BlockCache {
                ln1,
                h1,
                qkv,
                attn,
                ctx,
                ln2,
                h2,
                fc1_pre,
                fc1_act,
                qkv_adapter,
                out_adapter,
                fc1_adapter,
                fc2_adapter,
            });
        }

        // Final layer norm applied to the class token only (per-token norm;
        // other rows never reach the head).
        let mut class_final = vec![0.0f64; d];
        let final_ln = layer_norm_forward(
            &x[..d],
            &p[idx.final_ln_g].values,
            &p[idx.final_ln_b].values,
            1,
            d,
            &mut class_final,
        );
        let mut logits = vec![0.0f64; cfg.n_classes];
        linear_forward(
            &class_final,
            &p[idx.head_w].values,
            &p[idx.head_b].values,
            1,
            d,
            cfg.n_classes,
            &mut logits,
        );

        Ok(ForwardPass {
            patches,
            patch_adapter,
            blocks,
            final_ln,
            class_final,
            logits,
        })
    }

    /// Runs the model on one image.
    ///
    /// The patchified input is standardized to zero mean and unit variance
    /// before the patch projection. Returns the class logits and, per layer,
    /// the attention tensor `[n_heads × S × S]` (S = patches + 1); every
    /// attention row is a softmax distribution.
    pub fn forward(
        &self,
        img: &RgbSpectrogramImage,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), AstError> {
        let pass = self.forward_pass(img)?;
        let attns = pass.blocks.iter().map(|b| b.attn.clone()).collect();
        Ok((pass.logits, attns))
    }

    /// Final class-token representation (after the last layer norm) — the
    /// vector the classifier head reads. Useful as a generic feature
    /// extractor.
    pub fn embed(&self, img: &RgbSpectrogramImage) -> Result<Vec<f64>, AstError> {
        Ok(self.forward_pass(img)?.class_final)
    }

    /// Softmax class probabilities for one image.
    pub fn predict(&self, img: &RgbSpectrogramImage) -> Result<Vec<f64>, AstError> {
        let pass = self.forward_pass(img)?;
        Ok(softmax(&pass.logits))
    }

    /// Backpropagates `dlogits` through one cached forward pass, accumulating
    /// parameter gradients (frozen parameters are skipped).
    fn backward_pass(&self, pass: &ForwardPass, dlogits: &[f64], grads: &mut [Vec<f64>]) {
        let cfg = &self.cfg;
        let d = cfg.embed_dim;
        let s = cfg.seq_len();
        let np = cfg.n_patches();
        let pd = cfg.patch_dim();
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let hidden = cfg.mlp_hidden();
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let idx = &self.idx;

        let train = |i: usize| p[i].trainable;
        // Split-borrow helper: gradients for a (w, b) pair plus everything else.
        macro_rules! wb_grads {
            ($grads:expr, $wi:expr, $bi:expr) => {{
                debug_assert!($wi + 1 == $bi);
                let (left, right) = $grads.split_at_mut($bi);
                (&mut left[$wi], &mut right[0])
            }};
        }

        // Head.
        let mut d_class_final = vec![0.0f64; d];
        {
            let dw_db = if train(idx.head_w) {
                let (dw, db) = wb_grads!(grads, idx.head_w, idx.head_b);
                Some((&mut dw[..], &mut db[..]))
            } else {
                None
            };
            linear_backward(
                &pass.class_final,
                &p[idx.head_w].values,
                dlogits,
                1,
                d,
                cfg.n_classes,
                Some(&mut d_class_final),
                dw_db,
            );
        }

        // Final layer norm (class row only).
        let mut dx = vec![0.0f64; s * d];
        {
            let dg_db = if train(idx.final_ln_g) {
                let (dg, db) = wb_grads!(grads, idx.final_ln_g, idx.final_ln_b);
                Some((&mut dg[..], &mut db[..]))
            } else {
                None
            };
            layer_norm_backward(
                &pass.final_ln,
                &p[idx.final_ln_g].values,
                &d_class_final,
                1,
                d,
                &mut dx[..d],
                dg_db,
            );
        }

        for (l, (b, cache)) in idx.blocks.iter().zip(&pass.blocks).enumerate().rev() {
            // MLP branch backward: x_out = x_mid + fc2(gelu(fc1(LN2(x_mid)))).
            let d_fc2_out = dx.clone();
            let mut d_act = vec![0.0f64; s * hidden];
            {
                let dw_db = if train(b.fc2_w) {
                    let (dw, db) = wb_grads!(grads, b.fc2_w, b.fc2_b);
                    Some((&mut dw[..], &mut db[..]))
                } else {
                    None
                };
                linear_backward(
                    &cache.fc1_act,
                    &p[b.fc2_w].values,
                    &d_fc2_out,
                    s,
                    hidden,
                    d,
                    Some(&mut d_act),
                    dw_db,
                );
            }
            self.adapter_backward(
                LoraTarget::MlpFc2,
                Some(l),
                &cache.fc2_adapter,
                &cache.fc1_act,
                &d_fc2_out,
                s,
                hidden,
                d,
                &mut d_act,
                grads,
            );

            let mut d_pre = vec![0.0f64; s * hidden];
            for i in 0..s * hidden {
                d_pre[i] = d_act[i] * gelu_grad(cache.fc1_pre[i]);
            }

            let mut d_h2 = vec![0.0f64; s * d];
            {
                let dw_db = if train(b.fc1_w) {
                    let (dw, db) = wb_grads!(grads, b.fc1_w, b.fc1_b);
                    Some((&mut dw[..], &mut db[..]))
                } else {
                    None
                };
                linear_backward(
                    &cache.h2,
                    &p[b.fc1_w].values,
                    &d_pre,
                    s,
                    d,
                    hidden,
                    Some(&mut d_h2),
                    dw_db,
                );
            }
            self.adapter_backward(
                LoraTarget::MlpFc1,
                Some(l),
                &cache.fc1_adapter,
                &cache.h2,
                &d_pre,
                s,
                d,
                hidden,
                &mut d_h2,
                grads,
            );

            // dx becomes gradient w.r.t. x_mid (residual + LN2 path).
            {
                let dg_db = if train(b.ln2_g) {
                    let (dg, db) = wb_grads!(grads, b.ln2_g, b.ln2_b);
                    Some((&mut dg[..], &mut db[..]))
                } else {
                    None
                };
                layer_norm_backward(&cache.ln2, &p[b.ln2_g].values, &d_h2, s, d, &mut dx, dg_db);
            }

            // Attention branch backward: x_mid = x_in + out(ctx(attn)).
            let d_attn_out = dx.clone();
            let mut d_ctx = vec![0.0f64; s * d];
            {
                let dw_db = if train(b.out_w) {
                    let (dw, db) = wb_grads!(grads, b.out_w, b.out_b);
                    Some((&mut dw[..], &mut db[..]))
                } else {
                    None
                };
                linear_backward(
                    &cache.ctx,
                    &p[b.out_w].values,
                    &d_attn_out,
                    s,
                    d,
                    d,
                    Some(&mut d_ctx),
                    dw_db,
                );
            }
            self.adapter_backward(
                LoraTarget::AttentionOut,
                Some(l),
                &cache.out_adapter,
                &cache.ctx,
                &d_attn_out,
                s,
                d,
                d,
                &mut d_ctx,
                grads,
            );

            let mut d_qkv = vec![0.0f64; s * 3 * d];
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                let probs = &cache.attn[h * s * s..(h + 1) * s * s];

                for i in 0..s {
                    let drow_ctx = &d_ctx[i * d + h * dh..i * d + h * dh + dh];
                    let prow = &probs[i * s..(i + 1) * s];

                    // dP[i, j] = dctx_i · v_j ; dv_j += P[i, j] · dctx_i
                    let mut d_p = vec![0.0f64; s];
                    for j in 0..s {
                        let vj = &cache.qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                        let mut acc = 0.0;
                        for t in 0..dh {
                            acc += drow_ctx[t] * vj[t];
                        }
                        d_p[j] = acc;
                        let dvj = &mut d_qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                        let pj = prow[j];
                        if pj != 0.0 {
                            for t in 0..dh {
                                dvj[t] += pj * drow_ctx[t];
                            }
                        }
                    }

                    // Softmax backward (row-wise).
                    let dot: f64 = d_p.iter().zip(prow).map(|(a, b)| a * b).sum();
                    // dscores[j] = P[j]·(dP[j] − Σ dP·P)
                    for j in 0..s {
                        let ds = prow[j] * (d_p[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        // scores[i,j] = scale·q_i·k_j
                        let qi = &cache.qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
                        let kj = &cache.qkv[j * 3 * d + ko..j * 3 * d + ko + dh];
                        let (dqi, dkj) = if i < j {
                            let (a, bb) = d_qkv.split_at_mut(j * 3 * d);
                            (
                                &mut a[i * 3 * d + qo..i * 3 * d + qo + dh],
                                &mut bb[ko..ko + dh],
                            )
                        } else if i > j {
                            let (a, bb) = d_qkv.split_at_mut(i * 3 * d);
                            (
                                &mut bb[qo..qo + dh],
                                &mut a[j * 3 * d + ko..j * 3 * d + ko + dh],
                            )
                        } else {
                            let row = &mut d_qkv[i * 3 * d..(i + 1) * 3 * d];
                            let (a, bb) = row.split_at_mut(ko);
                            (&mut a[qo..qo + dh], &mut bb[..dh])
                        };
                        for t in 0..dh {
                            dqi[t] += ds * kj[t];
                            dkj[t] += ds * qi[t];
                        }
                    }
                }
            }

            let mut d_h1 = vec![0.0f64; s * d];
            {
                let dw_db = if train(b.qkv_w) {
                    let (dw, db) = wb_grads!(grads, b.qkv_w, b.qkv_b);
                    Some((&mut dw[..], &mut db[..]))
                } else {
                    None
                };
                linear_backward(
                    &cache.h1,
                    &p[b.qkv_w].values,
                    &d_qkv,
                    s,
                    d,
                    3 * d,
                    Some(&mut d_h1),
                    dw_db,
                );
            }
            self.adapter_backward(
                LoraTarget::AttentionQkv,
                Some(l),
                &cache.qkv_adapter,
                &cache.h1,
                &d_qkv,
                s,
                d,
                3 * d,
                &mut d_h1,
                grads,
            );

            // dx becomes gradient w.r.t. the block input (residual + LN1 path).
            {
                let dg_db = if train(b.ln1_g) {
                    let (dg, db) = wb_grads!(grads, b.ln1_g, b.ln1_b);
                    Some((&mut dg[..], &mut db[..]))
                } else {
                    None
                };
                layer_norm_backward(&cache.ln1, &p[b.ln1_g].values, &d_h1, s, d, &mut dx, dg_db);
            }
        }

        // Embeddings.
        if train(idx.pos_embed) {
            for (g, v) in grads[idx.pos_embed].iter_mut().zip(&dx) {
                *g += v;
            }
        }
        if train(idx.class_token) {
            for (g, v) in grads[idx.class_token].iter_mut().zip(&dx[..d]) {
                *g += v;
            }
        }
        {
            let dw_db = if train(idx.patch_w) {
                let (dw, db) = wb_grads!(grads, idx.patch_w, idx.patch_b);
                Some((&mut dw[..], &mut db[..]))
            } else {
                None
            };
            linear_backward(&pass.patches, &p[idx.patch_w].values, &dx[d..], np, pd, d, None, dw_db);
        }
        let mut d_patches_unused = vec![0.0f64; 0];
        // Patch-projection adapter still needs dA/dB even though d(patches)
        // itself is discarded.
        if self.adapter_for(LoraTarget::PatchProjection, None).is_some() {
            d_patches_unused = vec![0.0f64; np * pd];
        }
        self.adapter_backward(
            LoraTarget::PatchProjection,
            None,
            &pass.patch_adapter,
            &pass.patches,
            &dx[d..],
            np,
            pd,
            d,
            &mut d_patches_unused,
            grads,
        );
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.values.len()]).collect()
    }

    /// Mean cross-entropy loss and gradients over a batch.
    ///
    /// Gradients align with [`Self::params`]; frozen parameters get zeros.
    /// Batch items are processed in fixed chunks whose partial sums are
    /// reduced in order, so the result is independent of thread count.
    pub fn loss_and_grads(
        &self,
        batch: &[(&RgbSpectrogramImage, usize)],
    ) -> Result<BatchGrads, AstError> {
        if batch.is_empty() {
            return Err(AstError::InvalidParameter("empty batch".into()));
        }
        for (_, label) in batch {
            if *label >= self.cfg.n_classes {
                return Err(AstError::InvalidParameter(format!(
                    "label {label} outside [0, {})",
                    self.cfg.n_classes
                )));
            }
        }

        let n = batch.len();
        let chunk_size = n.div_ceil(GRAD_CHUNKS);
        let chunks: Vec<&[(&RgbSpectrogramImage, usize)]> = batch.chunks(chunk_size).collect();

        let partials: Vec<Result<(f64, usize, Vec<Vec<f64>>), AstError>> = chunks
            .par_iter()
            .map(|chunk| {
                let mut grads = self.zero_grads();
                let mut loss_sum = 0.0;
                let mut correct = 0;
                for (img, label) in *chunk {
                    let pass = self.forward_pass(img)?;
                    let probs = softmax(&pass.logits);
                    loss_sum += -probs[*label].max(1e-300).ln();
                    let pred = argmax(&pass.logits);
                    if pred == *label {
                        correct += 1;
                    }
                    let mut dlogits = probs;
                    dlogits[*label] -= 1.0;
                    for g in dlogits.iter_mut() {
                        *g /= n as f64;
                    }
                    self.backward_pass(&pass, &dlogits, &mut grads);
                }
                Ok((loss_sum, correct, grads))
            })
            .collect();

        let mut grads = self.zero_grads();
        let mut loss = 0.0;
        let mut correct = 0;
        for partial in partials {
            let (l, c, g) = partial?;
            loss += l;
            correct += c;
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, v) in acc.iter_mut().zip(part) {
                    *a += v;
                }
            }
        }

        Ok(BatchGrads {
            loss: loss / n as f64,
            correct,
            grads,
        })
    }

    /// Forward-only mean loss (used by finite-difference checks).
    pub fn loss_only(&self, batch: &[(&RgbSpectrogramImage, usize)]) -> Result<f64, AstError> {
        if batch.is_empty() {
            return Err(AstError::InvalidParameter("empty batch".into()));
        }
        let mut loss = 0.0;
        for (img, label) in batch {
            let pass = self.forward_pass(img)?;
            let probs = softmax(&pass.logits);
            loss += -probs[*label].max(1e-300).ln();
        }
        Ok(loss / batch.len() as f64)
    }

    /// Test-support access for gradient checking and optimizer tests.
    pub fn param_values_mut(&mut self, index: usize) -> &mut Vec<f64> {
        &mut self.params[index].values
    }

    pub fn set_trainable(&mut self, index: usize, trainable: bool) {
        self.params[index].trainable = trainable;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Learning rate at 1-based step `t`: linear warmup, then the schedule over
/// the remaining horizon.
fn lr_at_step(tc: &TrainConfig, t: usize, total_steps: usize) -> f64 {
    if tc.warmup_steps > 0 && t <= tc.warmup_steps {
        return tc.learning_rate * t as f64 / tc.warmup_steps as f64;
    }
    match tc.schedule {
        Schedule::Constant => tc.learning_rate,
        Schedule::Cosine => {
            let done = (t - tc.warmup_steps) as f64;
            let span = (total_steps.max(t) - tc.warmup_steps) as f64;
            tc.learning_rate * 0.5 * (1.0 + (PI * done / span).cos())
        }
    }
}

/// One AdamW step with global-norm clipping over trainable gradients.
/// Weight decay is decoupled and skipped for parameters flagged `decay=false`.
fn adamw_step(
    params: &mut [Param],
    grads: &mut [Vec<f64>],
    m: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
    t: usize,
    lr: f64,
    tc: &TrainConfig,
) {
    let mut norm_sq = 0.0;
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.trainable {
            norm_sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = norm_sq.sqrt();
    let clip_scale = if norm > tc.grad_clip_norm {
        tc.grad_clip_norm / norm
    } else {
        1.0
    };

    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for ((p, g), (pm, pv)) in params
        .iter_mut()
        .zip(grads.iter_mut())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        if !p.trainable {
            continue;
        }
        let wd = if p.decay { tc.weight_decay } else { 0.0 };
        for i in 0..p.values.len() {
            let gi = g[i] * clip_scale;
            pm[i] = ADAM_BETA1 * pm[i] + (1.0 - ADAM_BETA1) * gi;
            pv[i] = ADAM_BETA2 * pv[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = pm[i] / bc1;
            let vhat = pv[i] / bc2;
            p.values[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * p.values[i]);
        }
    }
}

/// Evaluates mean loss, accuracy, and per-item probabilities over a set.
pub fn evaluate(
    model: &AstModel,
    set: &[(RgbSpectrogramImage, usize)],
) -> Result<EvalStats, AstError> {
    if set.is_empty() {
        return Err(AstError::InvalidParameter("empty dataset".into()));
    }
    let chunk_size = set.len().div_ceil(GRAD_CHUNKS);
    let partials: Vec<Result<(f64, Vec<usize>, Vec<Vec<f64>>), AstError>> = set
        .chunks(chunk_size)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|chunk| {
            let mut loss = 0.0;
            let mut preds = Vec::with_capacity(chunk.len());
            let mut probs_all = Vec::with_capacity(chunk.len());
            for (img, label) in *chunk {
                if *label >= model.cfg.n_classes {
                    return Err(AstError::InvalidParameter(format!(
                        "label {label} outside [0, {})",
                        model.cfg.n_classes
                    )));
                }
                let pass = model.forward_pass(img)?;
                let probs = softmax(&pass.logits);
                loss += -probs[*label].max(1e-300).ln();
                preds.push(argmax(&pass.logits));
                probs_all.push(probs);
            }
            Ok((loss, preds, probs_all))
        })
        .collect();

    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(set.len());
    let mut probabilities = Vec::with_capacity(set.len());
    for partial in partials {
        let (l, preds, probs) = partial?;
        loss += l;
        predictions.extend(preds);
        probabilities.extend(probs);
    }
    let correct = predictions
        .iter()
        .zip(set)
        .filter(|(p, (_, y))| *p == y)
        .count();
    Ok(EvalStats {
        loss: loss / set.len() as f64,
        accuracy: correct as f64 / set.len() as f64,
        predictions,
        probabilities,
    })
}

/// Trains with AdamW, warmup + schedule, global-norm clipping, and early
/// stopping on validation accuracy (strict improvement); the best epoch's
/// weights are restored before returning. Deterministic given `tc.seed`.
/// Epoch ordering that interleaves the classes proportionally, so every
/// minibatch's class mix tracks the global ratio (±1 per class). Balanced
/// batches keep the per-batch gradient from being dominated by class-count
/// noise, which matters when the discriminative signal is small.
fn stratified_order(
    train_set: &[(RgbSpectrogramImage, usize)],
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, (_, label)) in train_set.iter().enumerate() {
        pools[*label].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(rng);
    }
    // Position each item at (k + 0.5)/len within its pool and merge by that
    // key: a deterministic proportional interleave.
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(train_set.len());
    for (class, pool) in pools.iter().enumerate() {
        for (k, &idx) in pool.iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / pool.len() as f64, class, idx));
        }
    }
    keyed.sort_by(|a, b| a.partial_cmp(b).expect("finite keys"));
    keyed.into_iter().map(|(_, _, idx)| idx).collect()
}

pub fn train(
    model: &mut AstModel,
    train_set: &[(RgbSpectrogramImage, usize)],
    val_set: &[(RgbSpectrogramImage, usize)],
    tc: &TrainConfig,
) -> Result<TrainHistory, AstError> {
    tc.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(AstError::InvalidParameter("empty dataset".into()));
    }

    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(tc.batch_size);
    let total_steps = tc.max_epochs * batches_per_epoch;

    let mut m: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
    let mut v = m.clone();

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params: Vec<Vec<f64>> = Vec::new();
    let mut epochs_without_improvement = 0usize;
    let mut step = 0usize;

    for epoch in 1..=tc.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(epoch as u64));
        let order = stratified_order(train_set, model.cfg.n_classes, &mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut last_lr = 0.0;
        for batch_idx in order.chunks(tc.batch_size) {
            let batch: Vec<(&RgbSpectrogramImage, usize)> = batch_idx
                .iter()
                .map(|&i| (&train_set[i].0, train_set[i].1))
                .collect();
            let mut out = model.loss_and_grads(&batch)?;
            step += 1;
            let lr = lr_at_step(tc, step, total_steps);
            last_lr = lr;
            adamw_step(&mut model.params, &mut out.grads, &mut m, &mut v, step, lr, tc);
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
        }

        let val = evaluate(model, val_set)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            learning_rate: last_lr,
        });

        if val.accuracy > best_acc {
            best_acc = val.accuracy;
            history.best_epoch = epoch;
            best_params = model.params.iter().map(|p| p.values.clone()).collect();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= tc.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    for (p, best) in model.params.iter_mut().zip(best_params) {
        p.values = best;
    }
    Ok(history)
}

/// Averages the class-token attention row across heads for one layer, drops
/// the class-token column, renormalizes to sum 1, and reshapes to the patch
/// grid.
pub fn class_attention_map(
    attns: &[Vec<f64>],
    layer: usize,
    cfg: &AstConfig,
) -> Result<AttentionMap, AstError> {
    if layer >= attns.len() {
        return Err(AstError::InvalidParameter(format!(
            "layer {layer} outside [0, {})",
            attns.len()
        )));
    }
    let s = cfg.seq_len();
    let heads = cfg.n_heads;
    if attns[layer].len() != heads * s * s {
        return Err(AstError::InvalidParameter(
            "attention tensor does not match config".into(),
        ));
    }
    let (gh, gw) = cfg.grid();

    let mut avg = vec![0.0f64; s];
    for h in 0..heads {
        let row = &attns[layer][h * s * s..h * s * s + s];
        for (a, &r) in avg.iter_mut().zip(row) {
            *a += r;
        }
    }
    for a in avg.iter_mut() {
        *a /= heads as f64;
    }

    let mut grid: Vec<f64> = avg[1..].to_vec();
    let sum: f64 = grid.iter().sum();
    if sum > 0.0 {
        for g in grid.iter_mut() {
            *g /= sum;
        }
    } else {
        let uniform = 1.0 / grid.len() as f64;
        grid.iter_mut().for_each(|g| *g = uniform);
    }

    Ok(AttentionMap {
        grid,
        gh,
        gw,
        source_layer: layer,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ASTCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    decay: bool,
    /// Offset into the payload, in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: AstConfig,
    dtype: String,
    lora: Option<LoraSpec>,
    tensors: Vec<CheckpointTensor>,
}

/// Writes a versioned checkpoint: magic, version, JSON header (config, LoRA
/// spec, tensor directory), then little-endian f64 payloads.
pub fn save_checkpoint(model: &AstModel, path: &Path) -> Result<(), AstError> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for p in &model.params {
        tensors.push(CheckpointTensor {
            name: p.name.clone(),
            shape: p.shape.clone(),
            trainable: p.trainable,
            decay: p.decay,
            offset,
            len: p.values.len() as u64,
        });
        offset += p.values.len() as u64;
    }
    let header = CheckpointHeader {
        config: model.cfg.clone(),
        dtype: "f64".into(),
        lora: model.lora.clone(),
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| AstError::Checkpoint(e.to_string()))?;

    let file = std::fs::File::create(path).map_err(|e| AstError::Checkpoint(e.to_string()))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| AstError::Checkpoint(e.to_string());
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    for p in &model.params {
        for v in &p.values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Loads a checkpoint, reconstructing the architecture from its config and
/// LoRA spec, then restoring parameter values bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<AstModel, AstError> {
    let file = std::fs::File::open(path).map_err(|e| AstError::Checkpoint(e.to_string()))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e: std::io::Error| AstError::Checkpoint(format!("truncated or unreadable: {e}"));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AstError::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(io_err)?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(AstError::Checkpoint(format!(
            "version mismatch: file {version}, supported {CHECKPOINT_VERSION}"
        )));
    }
    let mut header_len = [0u8; 8];
    r.read_exact(&mut header_len).map_err(io_err)?;
    let header_len = u64::from_le_bytes(header_len) as usize;
    if header_len > 64 * 1024 * 1024 {
        return Err(AstError::Checkpoint("header length implausible".into()));
    }
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io_err)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| AstError::Checkpoint(format!("bad header: {e}")))?;
    if header.dtype != "f64" {
        return Err(AstError::Checkpoint(format!(
            "unsupported dtype {}",
            header.dtype
        )));
    }

    let mut model = AstModel::new(header.config.clone(), 0)?;
    if let Some(spec) = header.lora.clone() {
        model.apply_lora(spec, 0)?;
    }
    if model.params.len() != header.tensors.len() {
        return Err(AstError::Checkpoint(format!(
            "tensor directory has {} entries, architecture expects {}",
            header.tensors.len(),
            model.params.len()
        )));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err)?;
    let total: u64 = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total as usize * 8 {
        return Err(AstError::Checkpoint(format!(
            "payload is {} bytes, directory expects {}",
            payload.len(),
            total * 8
        )));
    }

    for (p, t) in model.params.iter_mut().zip(&header.tensors) {
        if p.name != t.name || p.shape != t.shape {
            return Err(AstError::Checkpoint(format!(
                "tensor `{}` does not match architecture slot `{}`",
                t.name, p.name
            )));
        }
        p.trainable = t.trainable;
        p.decay = t.decay;
        let start = t.offset as usize * 8;
        for (i, v) in p.values.iter_mut().enumerate() {
            let raw: [u8; 8] = payload[start + i * 8..start + (i + 1) * 8]
                .try_into()
                .unwrap();
            *v = f64::from_le_bytes(raw);
        }
    }
    Ok(model)
}

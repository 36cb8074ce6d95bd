//! Two-stage training: logic construction on clean covers, then restoration
//! learning against the capture-noise model, plus joint-training and
//! stage-1-only baselines.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{Codec, FusionKind, Message, ModelShape};
use crate::error::{Error, Result};
use crate::nn;
use crate::noise::{apply_noise_pipeline, substream, NoiseConfig};
use crate::restorer::{stage2_loss_with_grad, LossWeights, Restorer};
use crate::sgxor::{GradEstimator, SgXorParams};

/// Everything a training run needs besides the data and the noise model.
/// Fields missing from a serialized form fall back to the toy preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub shape: ModelShape,
    pub fusion: FusionKind,
    pub estimator: GradEstimator,
    /// Slope and shift of the surrogate gradient gate.
    pub sgxor: SgXorParams,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub weight_decay: f32,
    pub base_lr: f32,
    pub min_lr: f32,
    /// Linear warmup length as a fraction of a run's total steps.
    pub warmup_frac: f32,
    /// Channel width of the restorer's first encoder level.
    pub restorer_base: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale preset: 64x64 covers, 64-bit messages, 30+30 epochs.
    ///
    /// The learning rate is an order above the full-scale preset: 30 epochs
    /// over 100 covers is only ~210 optimizer steps, and AdamW moves each
    /// weight at most ~lr per step, so at 1e-3 the decode map cannot cover
    /// the distance from init to a working solution inside the budget.
    pub fn toy() -> Self {
        TrainConfig {
            shape: ModelShape::toy(),
            fusion: FusionKind::SgXor,
            estimator: GradEstimator::SgXor,
            sgxor: SgXorParams::default(),
            batch_size: 16,
            epochs_stage1: 30,
            epochs_stage2: 30,
            weight_decay: 0.02,
            base_lr: 1e-2,
            min_lr: 1e-4,
            warmup_frac: 0.05,
            restorer_base: 4,
            loss: LossWeights::default(),
            seed: 0,
        }
    }

    /// Full-scale preset matching the 128x128/1024-bit model shape.
    pub fn paper() -> Self {
        TrainConfig {
            shape: ModelShape::paper(),
            epochs_stage1: 150,
            epochs_stage2: 150,
            restorer_base: 16,
            base_lr: 1e-3,
            min_lr: 1e-5,
            ..TrainConfig::toy()
        }
    }

    /// Stage epochs always add up to the run total.
    pub fn epochs_total(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.loss.validate()?;
        self.sgxor.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train config: batch_size must be >= 1"));
        }
        if self.epochs_total() == 0 {
            return Err(Error::config("train config: zero total epochs"));
        }
        if !(self.base_lr > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.base_lr {
            return Err(Error::config("train config: need 0 < min_lr <= base_lr"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("train config: warmup_frac outside [0, 1)"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config("train config: bad weight_decay"));
        }
        if self.restorer_base == 0 {
            return Err(Error::config("train config: restorer_base must be >= 1"));
        }
        Ok(())
    }

    fn warmup_steps(&self, total_steps: usize) -> usize {
        ((total_steps as f32 * self.warmup_frac).round() as usize).min(total_steps)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy()
    }
}

/// Mean squared error between soft decoder output and the message bits.
pub fn stage1_loss(m_pre: &[f32], msg: &Message) -> Result<f64> {
    Ok(stage1_grad(m_pre, msg)?.0)
}

/// Loss plus its gradient with respect to the soft output.
fn stage1_grad(m_pre: &[f32], msg: &Message) -> Result<(f64, Vec<f32>)> {
    if m_pre.len() != msg.len() {
        return Err(Error::shape(format!(
            "stage1_loss: {} outputs vs {} message bits",
            m_pre.len(),
            msg.len()
        )));
    }
    let n = m_pre.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; m_pre.len()];
    for (g, (&p, &b)) in grad.iter_mut().zip(m_pre.iter().zip(msg.bits())) {
        let e = p as f64 - b as f64;
        loss += e * e / n;
        *g = (2.0 * e / n) as f32;
    }
    Ok((loss, grad))
}

/// Linear ramp to `base_lr` over `warmup_steps`, then cosine decay to
/// `min_lr` at the final step. Steps past the end stay at `min_lr`.
pub fn cosine_warmup_lr(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    base_lr: f32,
    min_lr: f32,
) -> f32 {
    if total_steps == 0 || step + 1 >= total_steps.max(1) && total_steps <= warmup_steps {
        return min_lr;
    }
    if step < warmup_steps {
        return base_lr * step as f32 / warmup_steps as f32;
    }
    if step + 1 >= total_steps {
        return min_lr;
    }
    let span = (total_steps - 1 - warmup_steps).max(1) as f32;
    let progress = (step - warmup_steps) as f32 / span;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Aborts a run whose loss left the reals.
fn check_finite(loss: f64, stage: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{stage}: loss {loss} at step {step}")))
    }
}

/// Stage 1: optimizes the codec on clean covers with a fresh random message
/// per (image, step) pair; the decoder sees the unperturbed cover. Returns
/// the codec and the per-step batch-loss trace.
pub fn train_stage1(covers: &[Array3<f32>], cfg: &TrainConfig) -> Result<(Codec, Vec<f64>)> {
    cfg.validate()?;
    if covers.is_empty() {
        return Err(Error::input("train_stage1: empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codec = Codec::new(cfg.shape, cfg.fusion, cfg.estimator, &mut rng)?;
    codec.params = cfg.sgxor;
    // The extractor is weightless, so cover features never change.
    let x1: Vec<Array3<f32>> =
        covers.iter().map(|im| codec.extract_features(im)).collect::<Result<_>>()?;

    let mut opt = nn::AdamW::new(cfg.weight_decay);
    let spe = covers.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs_stage1 * spe;
    let warmup = cfg.warmup_steps(total);
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..covers.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs_stage1 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = codec.grad();
            let inv = 1.0 / chunk.len() as f32;
            let mut batch_loss = 0.0f64;
            for &i in chunk {
                let msg = Message::random(cfg.shape.msg_len, &mut rng);
                let (m_pre, ctx) = codec.forward_train(&x1[i], &x1[i], &msg)?;
                let (l, mut dm) = stage1_grad(&m_pre, &msg)?;
                batch_loss += l / chunk.len() as f64;
                for d in &mut dm {
                    *d *= inv;
                }
                codec.backward_train(&ctx, &dm, &mut grad)?;
            }
            check_finite(batch_loss, "stage 1", step)?;
            opt.begin_step(cosine_warmup_lr(step, total, warmup, cfg.base_lr, cfg.min_lr));
            codec.apply_grads(&grad, &mut opt);
            losses.push(batch_loss);
            step += 1;
        }
    }
    Ok((codec, losses))
}

/// Stage 2: optimizes only the restorer on (noised cover, cover) pairs.
/// The codec is taken by shared reference, so its weights cannot change;
/// callers can additionally compare `weights_digest` before and after.
pub fn train_stage2(
    covers: &[Array3<f32>],
    codec: &Codec,
    noise: &NoiseConfig,
    cfg: &TrainConfig,
) -> Result<(Restorer, Vec<f64>)> {
    cfg.validate()?;
    noise.validate()?;
    if covers.is_empty() {
        return Err(Error::input("train_stage2: empty dataset"));
    }
    let _ = codec.weights_digest(); // frozen input; digest is the caller-visible witness
    let mut rng = substream(cfg.seed, 2);
    let mut nrng = substream(noise.seed, 1);
    let mut restorer = Restorer::new(cfg.restorer_base, &mut rng);

    let mut opt = nn::AdamW::new(cfg.weight_decay);
    let spe = covers.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs_stage2 * spe;
    let warmup = cfg.warmup_steps(total);
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..covers.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs_stage2 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = restorer.grad();
            let inv = 1.0 / chunk.len() as f32;
            let mut batch_loss = 0.0f64;
            for &i in chunk {
                let noised = apply_noise_pipeline(&covers[i], noise, &mut nrng)?;
                let (restored, rctx) = restorer.forward_with_ctx(&noised)?;
                let (l, mut dre) = stage2_loss_with_grad(&restored, &covers[i], &cfg.loss)?;
                batch_loss += l / chunk.len() as f64;
                dre.mapv_inplace(|v| v * inv);
                restorer.backward(&rctx, &dre, &mut grad)?;
            }
            check_finite(batch_loss, "stage 2", step)?;
            opt.begin_step(cosine_warmup_lr(step, total, warmup, cfg.base_lr, cfg.min_lr));
            restorer.apply_grads(&grad, &mut opt);
            losses.push(batch_loss);
            step += 1;
        }
    }
    Ok((restorer, losses))
}

/// Joint baseline: a single stage optimizing codec and restorer end to end
/// through the noise layer with `L_de + stage2_loss` (1:1).
pub fn train_joint(
    covers: &[Array3<f32>],
    noise: &NoiseConfig,
    cfg: &TrainConfig,
) -> Result<(Pipeline, Vec<f64>)> {
    cfg.validate()?;
    noise.validate()?;
    if covers.is_empty() {
        return Err(Error::input("train_joint: empty dataset"));
    }
    let mut rng = substream(cfg.seed, 3);
    let mut nrng = substream(noise.seed, 1);
    let mut codec = Codec::new(cfg.shape, cfg.fusion, cfg.estimator, &mut rng)?;
    codec.params = cfg.sgxor;
    let mut restorer = Restorer::new(cfg.restorer_base, &mut rng);
    let x1: Vec<Array3<f32>> =
        covers.iter().map(|im| codec.extract_features(im)).collect::<Result<_>>()?;

    let mut copt = nn::AdamW::new(cfg.weight_decay);
    let mut ropt = nn::AdamW::new(cfg.weight_decay);
    let spe = covers.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs_total() * spe;
    let warmup = cfg.warmup_steps(total);
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..covers.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs_total() {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut cgrad = codec.grad();
            let mut rgrad = restorer.grad();
            let inv = 1.0 / chunk.len() as f32;
            let mut batch_loss = 0.0f64;
            for &i in chunk {
                let msg = Message::random(cfg.shape.msg_len, &mut rng);
                let noised = apply_noise_pipeline(&covers[i], noise, &mut nrng)?;
                let (restored, rctx) = restorer.forward_with_ctx(&noised)?;
                let (x1p, mctx) = codec.extract_features_ctx(&restored)?;
                let (m_pre, cctx) = codec.forward_train(&x1[i], &x1p, &msg)?;

                let (l_de, mut dm) = stage1_grad(&m_pre, &msg)?;
                let (l_vis, dvis) = stage2_loss_with_grad(&restored, &covers[i], &cfg.loss)?;
                batch_loss += (l_de + l_vis) / chunk.len() as f64;
                for d in &mut dm {
                    *d *= inv;
                }
                let (_dx1, dx1p) = codec.backward_train(&cctx, &dm, &mut cgrad)?;
                let mut dre = codec.features_backward(&dx1p, &mctx)?;
                ndarray::Zip::from(&mut dre).and(&dvis).for_each(|a, &b| *a += b * inv);
                restorer.backward(&rctx, &dre, &mut rgrad)?;
            }
            check_finite(batch_loss, "joint", step)?;
            let lr = cosine_warmup_lr(step, total, warmup, cfg.base_lr, cfg.min_lr);
            copt.begin_step(lr);
            codec.apply_grads(&cgrad, &mut copt);
            ropt.begin_step(lr);
            restorer.apply_grads(&rgrad, &mut ropt);
            losses.push(batch_loss);
            step += 1;
        }
    }
    Ok((Pipeline { codec, restorer }, losses))
}

/// A trained codec plus restorer, the unit that checkpoints move around.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub codec: Codec,
    pub restorer: Restorer,
}

/// Writes a checkpoint holding the config snapshot and all weights.
pub fn save_pipeline(path: &Path, pipe: &Pipeline, cfg: &TrainConfig) -> Result<()> {
    let json = serde_json::to_string(cfg)
        .map_err(|e| Error::config(format!("serialize train config: {e}")))?;
    let mut tensors = pipe.codec.named_tensors();
    tensors.extend(pipe.restorer.named_tensors());
    checkpoint::save_checkpoint(path, &json, &tensors)
}

/// Rebuilds a pipeline and its config from a checkpoint file.
pub fn load_pipeline(path: &Path) -> Result<(Pipeline, TrainConfig)> {
    let (json, tensors) = checkpoint::load_checkpoint(path)?;
    let cfg: TrainConfig = serde_json::from_str(&json)
        .map_err(|e| Error::MalformedCheckpoint(format!("config: {e}")))?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codec = Codec::new(cfg.shape, cfg.fusion, cfg.estimator, &mut rng)?;
    codec.params = cfg.sgxor;
    codec.load_named(&tensors)?;
    let mut restorer = Restorer::new(cfg.restorer_base, &mut rng);
    restorer.load_named(&tensors)?;
    Ok((Pipeline { codec, restorer }, cfg))
}

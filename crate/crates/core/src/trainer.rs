//! Two-stage training.
//!
//! Stage 1 fits the denoiser in latent space against encoded HR clips.
//! Stage 2 fine-tunes it through the frozen decoder in pixel space, drawing an
//! image batch with probability `phi` and a video batch otherwise. Only the
//! denoiser is ever updated.
//!
//! All randomness is derived from `(seed, step)`, so a run resumed from a
//! checkpoint continues exactly like an uninterrupted one.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, PerceptualExtractor};
use crate::media::{Frame, ImageSample, VideoClip};
use crate::models::{Checkpoint, ParamStore, TensorMap, TinyVae};
use crate::nn;
use crate::restorer::RestorerPipeline;

/// `train.*` configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    /// Probability of an image batch in stage 2.
    pub phi: f64,
    /// Iterations; unset means 2000 for stage 1 and 200 for stage 2.
    pub iters: Option<usize>,
    /// Learning rate; unset means 1e-3 for stage 1 and 2.5e-4 for stage 2.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub clip_frames: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Random training crop `[height, width]` in LR pixels.
    pub crop: Option<[usize; 2]>,
    /// VAE reconstruction pretraining before stage 1.
    pub vae_iters: usize,
    pub vae_lr: f64,
    pub vae_batch: usize,
    /// Square crop side in pixels for VAE pretraining.
    pub vae_crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            phi: 0.8,
            iters: None,
            lr: None,
            batch_size: 2,
            clip_frames: 9,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            crop: None,
            vae_iters: 1500,
            vae_lr: 2e-3,
            vae_batch: 8,
            vae_crop: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::config("train.stage", "must be 1 or 2"));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::config("train.phi", format!("{} is outside [0, 1]", self.phi)));
        }
        if self.iters == Some(0) {
            return Err(Error::config("train.iters", "must be at least 1"));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("train.lr", "must be positive"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.clip_frames == 0 {
            return Err(Error::config("train.clip_frames", "must be at least 1"));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be >= 0"));
        }
        if let Some([h, w]) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::config("train.crop", "crop sides must be positive"));
            }
        }
        if self.vae_batch == 0 || self.vae_crop == 0 || !(self.vae_lr > 0.0) {
            return Err(Error::config("train.vae_batch", "VAE batch, crop and lr must be positive"));
        }
        Ok(())
    }

    pub fn effective_iters(&self) -> usize {
        self.iters.unwrap_or(if self.stage == 1 { 2000 } else { 200 })
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(if self.stage == 1 { 1e-3 } else { 2.5e-4 })
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Image,
    Video,
}

/// Deterministic generator for one purpose at one step.
pub fn step_rng(seed: u64, step: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(purpose.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `Image` with probability `phi`, from the generator of `(seed, step)`.
pub fn sample_branch(seed: u64, step: u64, phi: f64) -> Branch {
    let u: f64 = step_rng(seed, step, "branch").random();
    if u < phi {
        Branch::Image
    } else {
        Branch::Video
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment buffers plus the update count.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected adaptive-moment update with decoupled weight decay:
///
/// ```text
/// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
/// p = p - lr * wd * p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adamw_step(
    params: &ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    hp: AdamW,
) -> Result<()> {
    for (name, g) in grads {
        let finite = nn::to_f64_vec(g)?.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, var) in params.iter() {
        let p = var.as_tensor();
        let g = match grads.get(name) {
            Some(g) => g.to_dtype(p.dtype())?,
            None => p.zeros_like()?,
        };
        let m = match state.m.get(name) {
            Some(m) => m.clone(),
            None => p.zeros_like()?,
        };
        let v = match state.v.get(name) {
            Some(v) => v.clone(),
            None => p.zeros_like()?,
        };
        let m = (m.affine(hp.beta1, 0.0)? + g.affine(1.0 - hp.beta1, 0.0)?)?;
        let v = (v.affine(hp.beta2, 0.0)? + g.sqr()?.affine(1.0 - hp.beta2, 0.0)?)?;
        let step = (m.affine(1.0 / bc1, 0.0)? / v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, hp.eps)?)?;
        let decayed = p.affine(1.0 - lr * hp.weight_decay, 0.0)?;
        var.set(&(decayed - step.affine(lr, 0.0)?)?.detach())?;
        state.m.insert(name.clone(), m.detach());
        state.v.insert(name.clone(), v.detach());
    }
    Ok(())
}

/// Step counter, optimizer buffers and running loss statistics.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub seed: u64,
    pub stage: u8,
    pub step: u64,
    pub adam: AdamState,
    /// Exponential moving average of the loss (factor 0.9).
    pub loss_ema: Option<f64>,
}

impl TrainState {
    pub fn new(seed: u64, stage: u8) -> Self {
        Self {
            seed,
            stage,
            step: 0,
            adam: AdamState::default(),
            loss_ema: None,
        }
    }

    pub fn sample_branch(&self, phi: f64) -> Branch {
        sample_branch(self.seed, self.step, phi)
    }

    fn record(&mut self, loss: f64) {
        self.loss_ema = Some(match self.loss_ema {
            Some(e) => 0.9 * e + 0.1 * loss,
            None => loss,
        });
    }

    /// Checkpoint of the models together with this state.
    pub fn to_checkpoint(&self, pipe: &RestorerPipeline, run_fingerprint: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_models(&pipe.models, self.step, self.stage, self.seed, run_fingerprint)?;
        let mut opt = TensorMap::new();
        for (prefix, map) in [("opt.m.", &self.adam.m), ("opt.v.", &self.adam.v)] {
            for (k, t) in map {
                let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                opt.insert(format!("{prefix}{k}"), (t.dims().to_vec(), data));
            }
        }
        ck.optimizer = opt;
        ck.extra = serde_json::json!({
            "adam_t": self.adam.t,
            "loss_ema_bits": self.loss_ema.map(f64::to_bits),
        });
        Ok(ck)
    }

    /// Restores the state saved by [`TrainState::to_checkpoint`]; parameters
    /// are loaded separately.
    pub fn from_checkpoint(ck: &Checkpoint, params: &ParamStore) -> Result<Self> {
        let mut adam = AdamState {
            t: ck.extra.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0),
            ..Default::default()
        };
        for (k, (shape, data)) in &ck.optimizer {
            let (target, name) = if let Some(n) = k.strip_prefix("opt.m.") {
                (&mut adam.m, n)
            } else if let Some(n) = k.strip_prefix("opt.v.") {
                (&mut adam.v, n)
            } else {
                return Err(Error::Incompatible(format!("unknown optimizer tensor `{k}`")));
            };
            let t = Tensor::from_slice(data, shape.as_slice(), params.device())?.to_dtype(params.dtype())?;
            target.insert(name.to_string(), t);
        }
        let loss_ema = ck
            .extra
            .get("loss_ema_bits")
            .and_then(|v| v.as_u64())
            .map(f64::from_bits);
        Ok(Self {
            seed: ck.seed,
            stage: ck.stage,
            step: ck.step,
            adam,
            loss_ema,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub branch: Branch,
    pub loss: f64,
    pub loss_terms: BTreeMap<String, f64>,
}

/// Paired LR/HR videos.
#[derive(Debug, Clone, Default)]
pub struct VideoPairs {
    pub lr: Vec<VideoClip>,
    pub hr: Vec<VideoClip>,
}

/// Paired LR/HR images.
#[derive(Debug, Clone, Default)]
pub struct ImagePairs {
    pub lr: Vec<ImageSample>,
    pub hr: Vec<ImageSample>,
}

fn check_pair(lr: (usize, usize, usize), hr: (usize, usize, usize), scale: usize, i: usize) -> Result<()> {
    if lr.0 != hr.0 || lr.1 * scale != hr.1 || lr.2 * scale != hr.2 {
        return Err(Error::Data(format!(
            "pair {i}: LR {}x{}x{} and HR {}x{}x{} do not match at scale {scale}",
            lr.0, lr.1, lr.2, hr.0, hr.1, hr.2
        )));
    }
    Ok(())
}

impl VideoPairs {
    pub fn validate(&self, scale: usize) -> Result<()> {
        if self.lr.is_empty() {
            return Err(Error::Data("video stream is empty".into()));
        }
        if self.lr.len() != self.hr.len() {
            return Err(Error::Data(format!("{} LR clips but {} HR clips", self.lr.len(), self.hr.len())));
        }
        for (i, (l, h)) in self.lr.iter().zip(&self.hr).enumerate() {
            check_pair((l.len(), l.height(), l.width()), (h.len(), h.height(), h.width()), scale, i)?;
        }
        Ok(())
    }
}

impl ImagePairs {
    pub fn validate(&self, scale: usize) -> Result<()> {
        if self.lr.is_empty() {
            return Err(Error::Data("image stream is empty".into()));
        }
        if self.lr.len() != self.hr.len() {
            return Err(Error::Data(format!("{} LR images but {} HR images", self.lr.len(), self.hr.len())));
        }
        for (i, (l, h)) in self.lr.iter().zip(&self.hr).enumerate() {
            let (l, h) = (l.frame(), h.frame());
            check_pair((1, l.height(), l.width()), (1, h.height(), h.width()), scale, i)?;
        }
        Ok(())
    }
}

/// A random temporal window and spatial crop, in LR pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    start: usize,
    len: usize,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

/// Spatial crop offsets are multiples of `align` LR pixels.
fn sample_window(
    rng: &mut ChaCha8Rng,
    (n, h, w): (usize, usize, usize),
    frames: usize,
    crop: Option<[usize; 2]>,
    align: usize,
) -> Window {
    let len = frames.min(n);
    let start = rng.random_range(0..=n - len);
    let (height, width) = match crop {
        Some([ch, cw]) => (ch.min(h), cw.min(w)),
        None => (h, w),
    };
    let top = align * rng.random_range(0..=(h - height) / align);
    let left = align * rng.random_range(0..=(w - width) / align);
    Window {
        start,
        len,
        top,
        left,
        height,
        width,
    }
}

fn check_finite(step: u64, loss: f64, terms: &BTreeMap<String, f64>) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step} is {loss} (terms {terms:?})")));
    }
    Ok(())
}

/// Gradients of the denoiser parameters, rescaled to global norm `clip`
/// when above it.
fn denoiser_grads(pipe: &RestorerPipeline, grads: &GradStore, clip: f64) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let mut sq = 0.0;
    for (name, var) in pipe.models.denoiser.params().iter() {
        if let Some(g) = grads.get(var) {
            sq += nn::scalar(&g.sqr()?.sum_all()?)?;
            out.insert(name.clone(), g.clone());
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {norm}")));
    }
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        for g in out.values_mut() {
            *g = g.affine(s, 0.0)?;
        }
    }
    Ok(out)
}

/// Model-level context shared by both stages.
pub struct Trainer<'a> {
    pub pipe: &'a RestorerPipeline,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub extractor: PerceptualExtractor,
}

impl<'a> Trainer<'a> {
    pub fn new(pipe: &'a RestorerPipeline, cfg: TrainConfig, weights: LossWeights, extractor: PerceptualExtractor) -> Result<Self> {
        cfg.validate()?;
        if !pipe.models.vae.params().is_frozen() {
            return Err(Error::Argument("the VAE must be frozen before denoiser training".into()));
        }
        Ok(Self {
            pipe,
            cfg,
            weights,
            extractor,
        })
    }

    fn latent_align(&self) -> usize {
        // LR pixels per latent patch, so crops stay on the patch grid.
        let f = self.pipe.models.config.vae.downsample;
        let p = self.pipe.models.config.denoiser.patch;
        let s = self.pipe.scale();
        let mut a = 1;
        while (a * s) % (f * p) != 0 {
            a += 1;
        }
        a
    }

    fn update(&self, state: &mut TrainState, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        let grads = denoiser_grads(self.pipe, &grads, self.cfg.grad_clip)?;
        adamw_step(
            self.pipe.models.denoiser.params(),
            &grads,
            &mut state.adam,
            self.cfg.effective_lr(),
            self.cfg.adamw(),
        )
    }

    /// Stage 1: latent MSE between the one-step restored latent and the HR
    /// latent. The VAE is frozen and deterministic, so each clip is encoded
    /// once up front and windows are cut from the cached latents.
    pub fn train_stage1(
        &self,
        data: &VideoPairs,
        state: &mut TrainState,
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        if self.cfg.stage != 1 || state.stage != 1 {
            return Err(Error::Argument("train_stage1 needs train.stage = 1".into()));
        }
        data.validate(self.pipe.scale())?;
        let vae = &self.pipe.models.vae;
        let mut cache = Vec::with_capacity(data.lr.len());
        for (lr, hr) in data.lr.iter().zip(&data.hr) {
            let z_lr = vae.encode_frames(&self.pipe.upscale(lr)?)?.detach();
            let x_hr = nn::frames_to_tensor(hr.frames(), vae.dtype(), vae.device())?;
            let z_hr = vae.encode_frames(&x_hr)?.detach();
            cache.push((z_lr, z_hr));
        }
        let f = self.pipe.models.config.vae.downsample;
        let s = self.pipe.scale();
        let align = self.latent_align();
        let iters = self.cfg.effective_iters() as u64;
        while state.step < iters {
            let mut rng = step_rng(state.seed, state.step, "batch");
            let mut total: Option<Tensor> = None;
            for _ in 0..self.cfg.batch_size {
                let i = rng.random_range(0..cache.len());
                let lr = &data.lr[i];
                let win = sample_window(&mut rng, (lr.len(), lr.height(), lr.width()), self.cfg.clip_frames, self.cfg.crop, align);
                let cut = |z: &Tensor| -> Result<Tensor> {
                    Ok(z.narrow(0, win.start, win.len)?
                        .narrow(2, win.top * s / f, win.height * s / f)?
                        .narrow(3, win.left * s / f, win.width * s / f)?)
                };
                let (z_lr, z_hr) = (cut(&cache[i].0)?, cut(&cache[i].1)?);
                let z_sr = self.pipe.denoise_latent_at(&z_lr, self.pipe.token_origin(win.top, win.left))?;
                let l = losses::stage1_loss(&z_sr, &z_hr)?;
                total = Some(match total {
                    Some(t) => (t + l)?,
                    None => l,
                });
            }
            let loss = total.expect("batch_size >= 1").affine(1.0 / self.cfg.batch_size as f64, 0.0)?;
            let value = nn::scalar(&loss)?;
            let terms = BTreeMap::from([("mse".to_string(), value)]);
            check_finite(state.step, value, &terms)?;
            self.update(state, &loss)?;
            state.record(value);
            log(&LogRecord {
                step: state.step,
                branch: Branch::Video,
                loss: value,
                loss_terms: terms,
            })?;
            state.step += 1;
        }
        Ok(())
    }

    /// The stage-2 loss of one step and its term breakdown.
    pub fn stage2_loss(
        &self,
        videos: &VideoPairs,
        images: &ImagePairs,
        branch: Branch,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, BTreeMap<String, f64>)> {
        let pipe = self.pipe;
        let s = pipe.scale();
        let align = self.latent_align();
        let (dtype, device) = (pipe.models.vae.dtype(), pipe.models.vae.device().clone());
        let mut total: Option<Tensor> = None;
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        for _ in 0..self.cfg.batch_size {
            let (lr, hr): (VideoClip, VideoClip) = match branch {
                Branch::Image => {
                    let i = rng.random_range(0..images.lr.len());
                    (images.lr[i].clone().into_clip(), images.hr[i].clone().into_clip())
                }
                Branch::Video => {
                    let i = rng.random_range(0..videos.lr.len());
                    (videos.lr[i].clone(), videos.hr[i].clone())
                }
            };
            let frames = if branch == Branch::Image { 1 } else { self.cfg.clip_frames };
            let win = sample_window(rng, (lr.len(), lr.height(), lr.width()), frames, self.cfg.crop, align);
            let lr = lr
                .slice(win.start, win.start + win.len)?
                .crop(win.top, win.left, win.height, win.width)?;
            let hr = hr
                .slice(win.start, win.start + win.len)?
                .crop(win.top * s, win.left * s, win.height * s, win.width * s)?;
            let x_sr = pipe.restore_upscaled_at(&pipe.upscale(&lr)?, pipe.token_origin(win.top, win.left))?;
            let x_hr = nn::frames_to_tensor(hr.frames(), dtype, &device)?;
            let value = match branch {
                Branch::Image => losses::stage2_image_loss(&x_sr, &x_hr, self.weights, &self.extractor)?,
                Branch::Video => losses::stage2_video_loss(&x_sr, &x_hr, self.weights, &self.extractor)?,
            };
            for (k, v) in value.terms {
                *terms.entry(k.to_string()).or_default() += v / self.cfg.batch_size as f64;
            }
            total = Some(match total {
                Some(t) => (t + value.total)?,
                None => value.total,
            });
        }
        let loss = total.expect("batch_size >= 1").affine(1.0 / self.cfg.batch_size as f64, 0.0)?;
        Ok((loss, terms))
    }

    /// Stage 2: mixed image/video pixel-space fine-tuning.
    pub fn train_stage2(
        &self,
        videos: &VideoPairs,
        images: &ImagePairs,
        state: &mut TrainState,
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        if self.cfg.stage != 2 || state.stage != 2 {
            return Err(Error::Argument("train_stage2 needs train.stage = 2".into()));
        }
        if self.cfg.phi < 1.0 {
            videos.validate(self.pipe.scale())?;
        }
        if self.cfg.phi > 0.0 {
            images.validate(self.pipe.scale())?;
        }
        let iters = self.cfg.effective_iters() as u64;
        while state.step < iters {
            let branch = state.sample_branch(self.cfg.phi);
            let mut rng = step_rng(state.seed, state.step, "batch");
            let (loss, terms) = self.stage2_loss(videos, images, branch, &mut rng)?;
            let value = nn::scalar(&loss)?;
            check_finite(state.step, value, &terms)?;
            self.update(state, &loss)?;
            state.record(value);
            log(&LogRecord {
                step: state.step,
                branch,
                loss: value,
                loss_terms: terms,
            })?;
            state.step += 1;
        }
        Ok(())
    }
}

/// Reconstruction pretraining of the VAE on random crops of `frames`.
/// Returns the per-step loss. The VAE is left unfrozen; freeze it before
/// handing it to the denoiser stages.
pub fn pretrain_vae(vae: &TinyVae, frames: &[Frame], cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::Data("no frames for VAE pretraining".into()));
    }
    if vae.params().is_frozen() {
        return Err(Error::Argument("cannot pretrain a frozen VAE".into()));
    }
    let f = vae.config().downsample;
    let hp = cfg.adamw();
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.vae_iters);
    for step in 0..cfg.vae_iters as u64 {
        let mut rng = step_rng(seed, step, "vae");
        let mut crops = Vec::with_capacity(cfg.vae_batch);
        for _ in 0..cfg.vae_batch {
            let fr = &frames[rng.random_range(0..frames.len())];
            let side = cfg.vae_crop.min(fr.height()).min(fr.width()) / f * f;
            if side == 0 {
                return Err(Error::Data(format!("frames smaller than the VAE factor {f}")));
            }
            let top = rng.random_range(0..=fr.height() - side);
            let left = rng.random_range(0..=fr.width() - side);
            crops.push(fr.crop(top, left, side, side)?);
        }
        let side = crops.iter().map(|c| c.height()).min().unwrap();
        let crops: Vec<Frame> = crops
            .into_iter()
            .map(|c| if c.height() == side { Ok(c) } else { c.crop(0, 0, side, side) })
            .collect::<Result<_>>()?;
        let x = nn::frames_to_tensor(&crops, vae.dtype(), vae.device())?;
        let recon = vae.decode_tensor_raw(&vae.encode_tensor(&x)?)?;
        let loss = losses::mse(&recon, &x)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("VAE loss at step {step} is {value}")));
        }
        let grads = loss.backward()?;
        let mut map = BTreeMap::new();
        let mut sq = 0.0;
        for (name, var) in vae.params().iter() {
            if let Some(g) = grads.get(var) {
                sq += nn::scalar(&g.sqr()?.sum_all()?)?;
                map.insert(name.clone(), g.clone());
            }
        }
        let norm = sq.sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            for g in map.values_mut() {
                *g = g.affine(cfg.grad_clip / norm, 0.0)?;
            }
        }
        adamw_step(vae.params(), &map, &mut adam, cfg.vae_lr, hp)?;
        losses.push(value);
    }
    vae.reset_counts();
    Ok(losses)
}

//! Spatiotemporal transformer that predicts the velocity `v` for a latent clip.
//!
//! Latents are cut into `patch x patch` tokens. Each block applies spatial
//! self-attention within a frame, temporal self-attention across frames at
//! the same token position, and an MLP, all pre-norm with residuals.
//! The conditioning is a learned null vector (standing in for an empty
//! prompt) plus an embedding of the timestep, added to every token.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::latent::LatentClip;
use super::params::{Init, ParamStore};
use crate::diffusion::Timestep;
use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Largest `frames * tokens_per_frame` accepted by one forward pass.
    pub max_tokens: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            patch: 2,
            width: 128,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            max_tokens: 8192,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::config("model.denoiser.patch", "must be positive"));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return Err(Error::config("model.denoiser.width", "must be a positive multiple of 4"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config("model.denoiser.heads", "must divide the width"));
        }
        if self.depth == 0 {
            return Err(Error::config("model.denoiser.depth", "must be positive"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("model.denoiser.mlp_ratio", "must be positive"));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("model.denoiser.max_tokens", "must be positive"));
        }
        Ok(())
    }
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    latent_channels: usize,
    params: ParamStore,
    temporal: bool,
    calls: AtomicUsize,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

fn xavier(init: &mut Init, inp: usize, out: usize) -> Vec<f64> {
    init.normal(inp * out, (2.0 / (inp + out) as f64).sqrt())
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, latent_channels: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut p = ParamStore::new(dtype, device);
        let w = cfg.width;
        let tok = latent_channels * cfg.patch * cfg.patch;
        let hidden = w * cfg.mlp_ratio;

        p.insert("patch_in.weight", &[tok, w], xavier(&mut init, tok, w))?;
        p.insert("patch_in.bias", &[w], Init::zeros(w))?;
        p.insert("null_condition", &[w], init.normal(w, 0.02))?;
        p.insert("time.fc1.weight", &[w, w], xavier(&mut init, w, w))?;
        p.insert("time.fc1.bias", &[w], Init::zeros(w))?;
        p.insert("time.fc2.weight", &[w, w], init.normal(w * w, 0.02))?;
        p.insert("time.fc2.bias", &[w], Init::zeros(w))?;
        for b in 0..cfg.depth {
            for norm in ["norm1", "norm2", "norm3"] {
                p.insert(format!("blocks.{b}.{norm}.weight"), &[w], Init::ones(w))?;
                p.insert(format!("blocks.{b}.{norm}.bias"), &[w], Init::zeros(w))?;
            }
            for attn in ["spatial", "temporal"] {
                p.insert(format!("blocks.{b}.{attn}.qkv.weight"), &[w, 3 * w], xavier(&mut init, w, 3 * w))?;
                p.insert(format!("blocks.{b}.{attn}.qkv.bias"), &[3 * w], Init::zeros(3 * w))?;
                p.insert(format!("blocks.{b}.{attn}.proj.weight"), &[w, w], init.normal(w * w, 0.02))?;
                p.insert(format!("blocks.{b}.{attn}.proj.bias"), &[w], Init::zeros(w))?;
            }
            p.insert(format!("blocks.{b}.mlp.fc1.weight"), &[w, hidden], xavier(&mut init, w, hidden))?;
            p.insert(format!("blocks.{b}.mlp.fc1.bias"), &[hidden], Init::zeros(hidden))?;
            p.insert(format!("blocks.{b}.mlp.fc2.weight"), &[hidden, w], init.normal(hidden * w, 0.02))?;
            p.insert(format!("blocks.{b}.mlp.fc2.bias"), &[w], Init::zeros(w))?;
        }
        p.insert("final_norm.weight", &[w], Init::ones(w))?;
        p.insert("final_norm.bias", &[w], Init::zeros(w))?;
        p.insert("patch_out.weight", &[w, tok], init.normal(w * tok, 0.02))?;
        p.insert("patch_out.bias", &[tok], Init::zeros(tok))?;
        Ok(Self::from_params(cfg, latent_channels, p))
    }

    pub fn from_params(cfg: DenoiserConfig, latent_channels: usize, params: ParamStore) -> Self {
        Self {
            cfg,
            latent_channels,
            params,
            temporal: true,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ablation switch: with temporal attention off, frames are processed
    /// independently.
    pub fn set_temporal_attention(&mut self, enabled: bool) {
        self.temporal = enabled;
    }

    pub fn temporal_attention(&self) -> bool {
        self.temporal
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// Tokens a latent of this shape would occupy.
    pub fn tokens_for(&self, frames: usize, h: usize, w: usize) -> usize {
        frames * (h / self.cfg.patch) * (w / self.cfg.patch)
    }

    fn w(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    /// Predicts `v` for the whole latent clip at timestep `t`.
    pub fn forward(&self, z: &LatentClip, t: Timestep) -> Result<LatentClip> {
        Ok(LatentClip::new(self.forward_tensor(z.values(), t)?, z.factor())?)
    }

    pub fn forward_tensor(&self, z: &Tensor, t: Timestep) -> Result<Tensor> {
        self.forward_tensor_at(z, t, (0, 0))
    }

    /// Forward pass on a spatial crop whose top-left token sits at `origin`
    /// (token rows, token columns) of the full latent grid, so a crop sees
    /// the same position encodings it would see inside the whole frame.
    pub fn forward_tensor_at(&self, z: &Tensor, t: Timestep, origin: (usize, usize)) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        let p = self.cfg.patch;
        if c != self.latent_channels {
            return Err(Error::Shape(format!("denoiser expects {} channels, got {c}", self.latent_channels)));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("latent {h}x{w} not divisible by patch {p}")));
        }
        let tokens = self.tokens_for(n, h, w);
        if tokens > self.cfg.max_tokens {
            return Err(Error::Capacity {
                tokens,
                budget: self.cfg.max_tokens,
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let dtype = self.params.dtype();
        let device = self.params.device().clone();
        let (gh, gw) = (h / p, w / p);
        let per_frame = gh * gw;

        // (n, c, gh, p, gw, p) -> (n, gh, gw, c, p, p) -> (n, L, c*p*p)
        let x = z
            .to_dtype(dtype)?
            .reshape((n, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((n, per_frame, c * p * p))?;
        let mut x = nn::linear(&x, &self.w("patch_in.weight")?, &self.w("patch_in.bias")?)?;

        let pos = self.position_table(origin, gh, gw, dtype, &device)?;
        let frame_pos = self.frame_table(n, dtype, &device)?;
        let cond = (self.w("null_condition")? + self.time_embedding(t, dtype, &device)?)?;
        x = x.broadcast_add(&pos)?.broadcast_add(&cond)?;

        for b in 0..self.cfg.depth {
            let pre = |name: &str| -> Result<Tensor> {
                nn::layer_norm(
                    &x,
                    &self.w(&format!("blocks.{b}.{name}.weight"))?,
                    &self.w(&format!("blocks.{b}.{name}.bias"))?,
                )
            };
            let h1 = pre("norm1")?;
            let a = self.attention(&h1, &format!("blocks.{b}.spatial"))?;
            x = (x + a)?;
            if self.temporal {
                let h2 = nn::layer_norm(
                    &x,
                    &self.w(&format!("blocks.{b}.norm2.weight"))?,
                    &self.w(&format!("blocks.{b}.norm2.bias"))?,
                )?;
                let h2 = h2.broadcast_add(&frame_pos)?.transpose(0, 1)?.contiguous()?;
                let a = self.attention(&h2, &format!("blocks.{b}.temporal"))?;
                x = (x + a.transpose(0, 1)?.contiguous()?)?;
            }
            let h3 = nn::layer_norm(
                &x,
                &self.w(&format!("blocks.{b}.norm3.weight"))?,
                &self.w(&format!("blocks.{b}.norm3.bias"))?,
            )?;
            let m = nn::linear(&h3, &self.w(&format!("blocks.{b}.mlp.fc1.weight"))?, &self.w(&format!("blocks.{b}.mlp.fc1.bias"))?)?
                .silu()?;
            let m = nn::linear(&m, &self.w(&format!("blocks.{b}.mlp.fc2.weight"))?, &self.w(&format!("blocks.{b}.mlp.fc2.bias"))?)?;
            x = (x + m)?;
        }
        let x = nn::layer_norm(&x, &self.w("final_norm.weight")?, &self.w("final_norm.bias")?)?;
        let x = nn::linear(&x, &self.w("patch_out.weight")?, &self.w("patch_out.bias")?)?;
        Ok(x.reshape((n, gh, gw, c, p, p))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((n, c, h, w))?)
    }

    /// Multi-head self-attention over the middle axis of `(groups, seq, width)`.
    fn attention(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let (groups, seq, width) = x.dims3()?;
        let heads = self.cfg.heads;
        let hd = width / heads;
        let qkv = nn::linear(x, &self.w(&format!("{prefix}.qkv.weight"))?, &self.w(&format!("{prefix}.qkv.bias"))?)?;
        let qkv = qkv.reshape((groups, seq, 3, heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let probs = nn::softmax_last_dim(&scores)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((groups, seq, width))?;
        nn::linear(&out, &self.w(&format!("{prefix}.proj.weight"))?, &self.w(&format!("{prefix}.proj.bias"))?)
    }

    /// Fixed sinusoidal table over token rows (first half of the width) and
    /// columns (second half), shared by every frame.
    fn position_table(&self, (y0, x0): (usize, usize), gh: usize, gw: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let half = self.cfg.width / 2;
        let mut data = Vec::with_capacity(gh * gw * 2 * half);
        for y in y0..y0 + gh {
            let row = nn::sincos(y as f64, half, 100.0);
            for x in x0..x0 + gw {
                data.extend_from_slice(&row);
                data.extend(nn::sincos(x as f64, half, 100.0));
            }
        }
        Ok(Tensor::from_vec(data, (1, gh * gw, 2 * half), device)?.to_dtype(dtype)?)
    }

    /// Frame-index encoding `(n, 1, width)`. It only enters the temporal
    /// attention input, so with temporal attention off the frames are
    /// processed independently of their position in the clip.
    fn frame_table(&self, n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let width = self.cfg.width;
        let data: Vec<f64> = (0..n).flat_map(|t| nn::sincos(t as f64, width, 100.0)).collect();
        Ok(Tensor::from_vec(data, (n, 1, width), device)?.to_dtype(dtype)?)
    }

    fn time_embedding(&self, t: Timestep, dtype: DType, device: &Device) -> Result<Tensor> {
        let width = self.cfg.width;
        let table = Tensor::from_vec(nn::sincos(t.get() as f64, width, 10_000.0), (1, width), device)?.to_dtype(dtype)?;
        let h = nn::linear(&table, &self.w("time.fc1.weight")?, &self.w("time.fc1.bias")?)?.silu()?;
        Ok(nn::linear(&h, &self.w("time.fc2.weight")?, &self.w("time.fc2.bias")?)?.reshape(width)?)
    }
}

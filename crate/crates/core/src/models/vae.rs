//! Per-frame convolutional autoencoder.
//!
//! Every frame is encoded and decoded on its own, so encoding a clip frame by
//! frame is exactly the same as encoding it as a batch. The encoder folds
//! `f x f` pixel blocks into channels and runs a few 3x3 convolutions at
//! latent resolution; the decoder mirrors it and unfolds with a pixel
//! shuffle. A linear block path runs alongside both halves.
//!
//! The mapping is deterministic: the latent is the encoder output, there is
//! no sampling.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::latent::LatentClip;
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::media::Frame;
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Spatial downsample factor `f`.
    pub downsample: usize,
    /// Latent channels `c`.
    pub latent_channels: usize,
    /// Width of the hidden convolutions.
    pub hidden: usize,
    /// Number of 3x3 convolutions on each side.
    pub blocks: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            latent_channels: 8,
            hidden: 32,
            blocks: 3,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::config("model.vae.downsample", "must be positive"));
        }
        if self.latent_channels == 0 {
            return Err(Error::config("model.vae.latent_channels", "must be positive"));
        }
        if self.hidden == 0 || self.blocks == 0 {
            return Err(Error::config("model.vae.hidden", "hidden width and block count must be positive"));
        }
        Ok(())
    }

    fn folded(&self) -> usize {
        3 * self.downsample * self.downsample
    }
}

pub struct TinyVae {
    cfg: VaeConfig,
    params: ParamStore,
    encode_calls: AtomicUsize,
    decode_calls: AtomicUsize,
}

impl std::fmt::Debug for TinyVae {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TinyVae").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

fn conv_init(init: &mut Init, out: usize, inp: usize, k: usize) -> Vec<f64> {
    let fan_in = (inp * k * k) as f64;
    init.normal(out * inp * k * k, (2.0 / fan_in).sqrt())
}

impl TinyVae {
    pub fn new(cfg: VaeConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut p = ParamStore::new(dtype, device);
        let (c, h, folded) = (cfg.latent_channels, cfg.hidden, cfg.folded());

        // Linear paths start near a plain block projection; the nonlinear
        // branches start small.
        p.insert("enc.skip.weight", &[c, folded, 1, 1], init.normal(c * folded, (1.0 / folded as f64).sqrt()))?;
        p.insert("enc.skip.bias", &[c], Init::zeros(c))?;
        for i in 0..cfg.blocks {
            let inp = if i == 0 { folded } else { h };
            p.insert(format!("enc.conv{i}.weight"), &[h, inp, 3, 3], conv_init(&mut init, h, inp, 3))?;
            p.insert(format!("enc.conv{i}.bias"), &[h], Init::zeros(h))?;
        }
        p.insert("enc.out.weight", &[c, h, 1, 1], init.normal(c * h, 0.1 / (h as f64).sqrt()))?;
        p.insert("enc.out.bias", &[c], Init::zeros(c))?;

        p.insert("dec.skip.weight", &[folded, c, 1, 1], init.normal(folded * c, (1.0 / c as f64).sqrt()))?;
        p.insert("dec.skip.bias", &[folded], Init::zeros(folded))?;
        for i in 0..cfg.blocks {
            let inp = if i == 0 { c } else { h };
            p.insert(format!("dec.conv{i}.weight"), &[h, inp, 3, 3], conv_init(&mut init, h, inp, 3))?;
            p.insert(format!("dec.conv{i}.bias"), &[h], Init::zeros(h))?;
        }
        p.insert("dec.out.weight", &[folded, h, 1, 1], init.normal(folded * h, 0.1 / (h as f64).sqrt()))?;
        p.insert("dec.out.bias", &[folded], Init::zeros(folded))?;
        Ok(Self::from_params(cfg, p))
    }

    pub fn from_params(cfg: VaeConfig, params: ParamStore) -> Self {
        Self {
            cfg,
            params,
            encode_calls: AtomicUsize::new(0),
            decode_calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Number of encoder / decoder invocations so far.
    pub fn call_counts(&self) -> (usize, usize) {
        (
            self.encode_calls.load(Ordering::Relaxed),
            self.decode_calls.load(Ordering::Relaxed),
        )
    }

    pub fn reset_counts(&self) {
        self.encode_calls.store(0, Ordering::Relaxed);
        self.decode_calls.store(0, Ordering::Relaxed);
    }

    fn w(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    /// Encodes a batch `(b, 3, H, W)` with values in `[0, 1]` to `(b, c, H/f, W/f)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, ch, h, w) = x.dims4()?;
        let f = self.cfg.downsample;
        if ch != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {ch}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("frame {h}x{w} is not divisible by the VAE factor {f}")));
        }
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let x = x.to_dtype(self.dtype())?.affine(2.0, -1.0)?;
        let folded = nn::pixel_unshuffle(&x, f)?;
        let skip = nn::conv2d(&folded, &self.w("enc.skip.weight")?, &self.w("enc.skip.bias")?)?;
        let mut hdn = folded;
        for i in 0..self.cfg.blocks {
            hdn = nn::conv2d(&hdn, &self.w(&format!("enc.conv{i}.weight"))?, &self.w(&format!("enc.conv{i}.bias"))?)?
                .silu()?;
        }
        let out = nn::conv2d(&hdn, &self.w("enc.out.weight")?, &self.w("enc.out.bias")?)?;
        Ok((skip + out)?)
    }

    /// Decodes `(b, c, h, w)` to `(b, 3, h*f, w*f)` without output clamping.
    pub fn decode_tensor_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (_, ch, _, _) = z.dims4()?;
        if ch != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {ch}",
                self.cfg.latent_channels
            )));
        }
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        let z = z.to_dtype(self.dtype())?;
        let skip = nn::conv2d(&z, &self.w("dec.skip.weight")?, &self.w("dec.skip.bias")?)?;
        let mut hdn = z;
        for i in 0..self.cfg.blocks {
            hdn = nn::conv2d(&hdn, &self.w(&format!("dec.conv{i}.weight"))?, &self.w(&format!("dec.conv{i}.bias"))?)?
                .silu()?;
        }
        let out = (skip + nn::conv2d(&hdn, &self.w("dec.out.weight")?, &self.w("dec.out.bias")?)?)?;
        Ok(nn::pixel_shuffle(&out, self.cfg.downsample)?.affine(0.5, 0.5)?)
    }

    /// Decodes and clamps to the `[0, 1]` pixel range.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_tensor_raw(z)?.clamp(0.0, 1.0)?)
    }

    /// Frame-by-frame encoding of an `(n, 3, H, W)` clip: one encoder call
    /// per frame, concatenated along the frame axis.
    pub fn encode_frames(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let parts = (0..n)
            .map(|t| self.encode_tensor(&x.narrow(0, t, 1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Frame-by-frame decoding, the inverse of [`TinyVae::encode_frames`].
    pub fn decode_frames(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.dim(0)?;
        let parts = (0..n)
            .map(|t| self.decode_tensor(&z.narrow(0, t, 1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<LatentClip> {
        let x = nn::frames_to_tensor(std::slice::from_ref(frame), self.dtype(), self.device())?;
        LatentClip::new(self.encode_tensor(&x)?, self.cfg.downsample)
    }

    pub fn decode_frame(&self, latent: &LatentClip) -> Result<Frame> {
        if latent.frames() != 1 {
            return Err(Error::Shape(format!("expected a 1-frame latent, got {}", latent.frames())));
        }
        let x = self.decode_tensor(latent.values())?;
        Ok(nn::tensor_to_frames(&x)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, seed: usize) -> Frame {
        Frame::from_fn(h, w, |c, y, x| (((c + seed) * 7 + y * 3 + x * 5) % 23) as f32 / 22.0).unwrap()
    }

    #[test]
    fn encode_shape_contract() {
        let vae = TinyVae::new(VaeConfig::default(), DType::F32, &Device::Cpu, 0).unwrap();
        let z = vae.encode_frame(&frame(64, 64, 0)).unwrap();
        assert_eq!(z.dims(), (1, 8, 16, 16));
        let x = vae.decode_frame(&z).unwrap();
        assert_eq!((x.height(), x.width()), (64, 64));
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn indivisible_and_channel_mismatch() {
        let vae = TinyVae::new(VaeConfig::default(), DType::F32, &Device::Cpu, 0).unwrap();
        assert!(matches!(vae.encode_frame(&frame(30, 32, 0)), Err(Error::Shape(_))));
        let bad = LatentClip::new(Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap(), 4).unwrap();
        assert!(matches!(vae.decode_frame(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn deterministic() {
        let vae = TinyVae::new(VaeConfig::default(), DType::F32, &Device::Cpu, 3).unwrap();
        let f = frame(32, 48, 1);
        let a = nn::to_f64_vec(vae.encode_frame(&f).unwrap().values()).unwrap();
        let b = nn::to_f64_vec(vae.encode_frame(&f).unwrap().values()).unwrap();
        assert_eq!(a, b);
        let z = vae.encode_frame(&f).unwrap();
        assert_eq!(vae.decode_frame(&z).unwrap(), vae.decode_frame(&z).unwrap());
    }

    #[test]
    fn per_frame_equals_batch() {
        let vae = TinyVae::new(VaeConfig::default(), DType::F64, &Device::Cpu, 5).unwrap();
        let frames: Vec<Frame> = (0..4).map(|i| frame(16, 24, i)).collect();
        let x = nn::frames_to_tensor(&frames, DType::F64, &Device::Cpu).unwrap();
        let batch = nn::to_f64_vec(&vae.encode_tensor(&x).unwrap()).unwrap();
        let mut looped = Vec::new();
        for f in &frames {
            looped.extend(nn::to_f64_vec(vae.encode_frame(f).unwrap().values()).unwrap());
        }
        for (a, b) in batch.iter().zip(&looped) {
            assert!((a - b).abs() < 1e-6);
        }
        vae.reset_counts();
        vae.encode_frames(&x).unwrap();
        assert_eq!(vae.call_counts(), (4, 0));
    }
}

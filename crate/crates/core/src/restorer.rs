//! One-step super-resolution: bilinear upscale, frame-wise encode, a single
//! v-prediction denoise over the whole latent clip, frame-wise decode.

use candle_core::Tensor;

use crate::diffusion::{DiffusionConfig, NoiseSchedule, Timestep};
use crate::error::{Error, Result};
use crate::media::{resize_bilinear, ImageSample, VideoClip};
use crate::models::VsrModels;
use crate::nn;

#[derive(Debug)]
pub struct RestorerPipeline {
    pub models: VsrModels,
    schedule: NoiseSchedule,
    t_star: Timestep,
    scale: usize,
    /// Frames per denoiser call; 0 means "whole clip when it fits the token
    /// budget, otherwise the largest chunk that does".
    chunk_frames: usize,
}

impl RestorerPipeline {
    pub fn new(models: VsrModels, diffusion: &DiffusionConfig, scale: usize) -> Result<Self> {
        diffusion.validate()?;
        if scale == 0 {
            return Err(Error::Argument("scale must be at least 1".into()));
        }
        let schedule = diffusion.schedule()?;
        let t_star = diffusion.timestep(&schedule)?;
        Ok(Self {
            models,
            schedule,
            t_star,
            scale,
            chunk_frames: 0,
        })
    }

    pub fn with_chunk_frames(mut self, chunk_frames: usize) -> Self {
        self.chunk_frames = chunk_frames;
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn t_star(&self) -> Timestep {
        self.t_star
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn alpha_bar(&self) -> f64 {
        self.schedule.alpha_bar(self.t_star)
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.models.config.vae.downsample;
        let (hh, ww) = (h * self.scale, w * self.scale);
        if hh % f != 0 || ww % f != 0 {
            return Err(Error::Shape(format!(
                "upscaled size {hh}x{ww} is not divisible by the VAE factor {f}"
            )));
        }
        let p = self.models.config.denoiser.patch;
        if (hh / f) % p != 0 || (ww / f) % p != 0 {
            return Err(Error::Shape(format!(
                "latent size {}x{} is not divisible by the patch size {p}",
                hh / f,
                ww / f
            )));
        }
        Ok(())
    }

    /// Per-frame bilinear upscale stacked as an `(n, 3, sH, sW)` tensor in
    /// the model precision.
    pub fn upscale(&self, lr: &VideoClip) -> Result<Tensor> {
        self.check_dims(lr.height(), lr.width())?;
        let (h, w) = (lr.height() * self.scale, lr.width() * self.scale);
        let frames = lr
            .frames()
            .iter()
            .map(|f| resize_bilinear(f, h, w))
            .collect::<Result<Vec<_>>>()?;
        nn::frames_to_tensor(&frames, self.models.vae.dtype(), self.models.vae.device())
    }

    /// `sqrt(abar) * z_lr - sqrt(1 - abar) * v(z_lr)` with one denoiser call.
    pub fn denoise_latent(&self, z_lr: &Tensor) -> Result<Tensor> {
        self.denoise_latent_at(z_lr, (0, 0))
    }

    /// [`Self::denoise_latent`] for a crop whose top-left latent token is at
    /// `origin` in the full frame.
    pub fn denoise_latent_at(&self, z_lr: &Tensor, origin: (usize, usize)) -> Result<Tensor> {
        let v = self.models.denoiser.forward_tensor_at(z_lr, self.t_star, origin)?;
        let abar = self.alpha_bar();
        Ok((z_lr.affine(abar.sqrt(), 0.0)? - v.affine((1.0 - abar).sqrt(), 0.0)?)?)
    }

    /// Differentiable restore of an already upscaled `(n, 3, H, W)` clip as a
    /// single chunk. Output is clamped to `[0, 1]`.
    pub fn restore_upscaled(&self, x_up: &Tensor) -> Result<Tensor> {
        self.restore_upscaled_at(x_up, (0, 0))
    }

    pub fn restore_upscaled_at(&self, x_up: &Tensor, origin: (usize, usize)) -> Result<Tensor> {
        let z_lr = self.models.vae.encode_frames(x_up)?;
        let z_sr = self.denoise_latent_at(&z_lr, origin)?;
        self.models.vae.decode_frames(&z_sr)
    }

    /// Token-grid position of an LR-pixel offset. Offsets must lie on the
    /// patch grid.
    pub fn token_origin(&self, top: usize, left: usize) -> (usize, usize) {
        let cell = self.models.config.vae.downsample * self.models.config.denoiser.patch;
        (top * self.scale / cell, left * self.scale / cell)
    }

    fn chunk_len(&self, n: usize, h: usize, w: usize) -> Result<usize> {
        let f = self.models.config.vae.downsample;
        let den = &self.models.denoiser;
        let per_frame = den.tokens_for(1, h * self.scale / f, w * self.scale / f);
        let budget = den.config().max_tokens;
        if per_frame > budget {
            return Err(Error::Capacity {
                tokens: per_frame,
                budget,
            });
        }
        Ok(match self.chunk_frames {
            0 => n.min(budget / per_frame),
            c => c.min(n),
        })
    }

    /// Restores a clip. Clips beyond the token budget (or longer than the
    /// configured chunk) are cut into consecutive non-overlapping chunks.
    pub fn restore(&self, lr: &VideoClip) -> Result<VideoClip> {
        let n = lr.len();
        self.check_dims(lr.height(), lr.width())?;
        let chunk = self.chunk_len(n, lr.height(), lr.width())?;
        let x_up = self.upscale(lr)?;
        let mut frames = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let out = self.restore_upscaled(&x_up.narrow(0, start, len)?)?;
            frames.extend(nn::tensor_to_frames(&out)?);
            start += len;
        }
        VideoClip::new(frames, lr.fps())
    }

    /// An image is restored as a single-frame clip.
    pub fn restore_image(&self, img: &ImageSample) -> Result<ImageSample> {
        let clip = self.restore(&img.clone().into_clip())?;
        Ok(ImageSample(clip.into_frames().remove(0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Frame;
    use crate::models::{DenoiserConfig, ModelConfig, VaeConfig};
    use candle_core::{DType, Device};

    fn small_models(dtype: DType) -> VsrModels {
        let cfg = ModelConfig {
            vae: VaeConfig {
                hidden: 8,
                blocks: 1,
                ..Default::default()
            },
            denoiser: DenoiserConfig {
                width: 16,
                heads: 2,
                depth: 1,
                max_tokens: 256,
                ..Default::default()
            },
        };
        VsrModels::new(cfg, dtype, &Device::Cpu, 5).unwrap()
    }

    fn clip(n: usize, h: usize, w: usize, seed: u32) -> VideoClip {
        let frames = (0..n)
            .map(|t| {
                Frame::from_fn(h, w, |c, y, x| {
                    let v = ((x * 7 + y * 13 + c * 5 + t * 3) as u32 ^ seed) % 17;
                    v as f32 / 16.0
                })
                .unwrap()
            })
            .collect();
        VideoClip::new(frames, 24.0).unwrap()
    }

    #[test]
    fn shape_and_single_call() {
        let pipe = RestorerPipeline::new(small_models(DType::F32), &DiffusionConfig::default(), 4).unwrap();
        let lr = clip(3, 4, 8, 1);
        let out = pipe.restore(&lr).unwrap();
        assert_eq!((out.len(), out.height(), out.width()), (3, 16, 32));
        assert_eq!(pipe.models.denoiser.calls(), 1);
        let again = pipe.restore(&lr).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn chunks_long_clips() {
        // 4x8 LR -> 4x8 latent at f=4, scale 4 -> 2x4 patches = 8 tokens per frame.
        let pipe = RestorerPipeline::new(small_models(DType::F32), &DiffusionConfig::default(), 4).unwrap();
        let lr = clip(40, 4, 8, 2);
        let out = pipe.restore(&lr).unwrap();
        assert_eq!(out.len(), 40);
        assert_eq!(pipe.models.denoiser.calls(), 2);
        let pipe = pipe.with_chunk_frames(7);
        pipe.models.denoiser.reset_calls();
        pipe.restore(&lr).unwrap();
        assert_eq!(pipe.models.denoiser.calls(), 6);
    }

    #[test]
    fn divisibility_error() {
        let pipe = RestorerPipeline::new(small_models(DType::F32), &DiffusionConfig::default(), 2).unwrap();
        assert!(matches!(pipe.restore(&clip(1, 3, 4, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn image_equals_single_frame_clip() {
        let pipe = RestorerPipeline::new(small_models(DType::F32), &DiffusionConfig::default(), 4).unwrap();
        let lr = clip(1, 4, 4, 3);
        let img = ImageSample(lr.frames()[0].clone());
        let a = pipe.restore_image(&img).unwrap();
        let b = pipe.restore(&lr).unwrap();
        assert_eq!(a.frame(), &b.frames()[0]);
        assert_eq!((a.frame().height(), a.frame().width()), (16, 16));
    }

    #[test]
    fn identical_frames_stay_identical_without_temporal_attention() {
        let mut models = small_models(DType::F32);
        models.denoiser.set_temporal_attention(false);
        let pipe = RestorerPipeline::new(models, &DiffusionConfig::default(), 4).unwrap();
        let one = clip(1, 4, 8, 4);
        let lr = VideoClip::new(vec![one.frames()[0].clone(); 5], 24.0).unwrap();
        let out = pipe.restore(&lr).unwrap();
        for f in &out.frames()[1..] {
            for (a, b) in f.data().iter().zip(out.frames()[0].data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_velocity_matches_hand_composition() {
        let models = small_models(DType::F64);
        for name in ["patch_out.weight", "patch_out.bias"] {
            let w = models.denoiser.params().get(name).unwrap();
            models.denoiser.params().set(name, &w.zeros_like().unwrap()).unwrap();
        }
        let pipe = RestorerPipeline::new(models, &DiffusionConfig::default(), 4).unwrap();
        let lr = clip(2, 4, 4, 5);
        let out = pipe.restore(&lr).unwrap();

        let abar = pipe.alpha_bar();
        let vae = &pipe.models.vae;
        for (t, f) in lr.frames().iter().enumerate() {
            let up = resize_bilinear(f, 16, 16).unwrap();
            let z = vae.encode_frame(&up).unwrap();
            let scaled = crate::models::LatentClip::new((z.values() * abar.sqrt()).unwrap(), 4).unwrap();
            let expected = vae.decode_frame(&scaled).unwrap();
            for (a, b) in out.frames()[t].data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradient_reaches_denoiser_through_image_path() {
        let pipe = RestorerPipeline::new(small_models(DType::F64), &DiffusionConfig::default(), 4).unwrap();
        let lr = clip(1, 4, 4, 6);
        let x_up = pipe.upscale(&lr).unwrap();
        let out = pipe.restore_upscaled(&x_up).unwrap();
        let loss = (out - &x_up).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut norm = 0.0;
        for (_, var) in pipe.models.denoiser.params().iter() {
            if let Some(g) = grads.get(var) {
                norm += nn::to_f64_vec(g).unwrap().iter().map(|v| v * v).sum::<f64>();
            }
        }
        assert!(norm > 0.0);
    }
}

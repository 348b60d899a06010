//! Seeded second-order degradation producing LQ inputs from HQ media.
//!
//! Each of the two stages applies, when drawn, a Gaussian blur, a rescale, an
//! additive noise field and a block-DCT compression surrogate. A final
//! bicubic resize brings the result to exactly `1 / scale` of the input.
//!
//! Blur kernel, noise level and compression quality are drawn once per clip;
//! only the noise field itself changes from frame to frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{resize_bicubic, resize_bilinear, Frame, ImageSample, VideoClip};

/// Draw ranges for one degradation stage. A stage table given in a config
/// file must list every key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeStageConfig {
    pub blur_prob: f64,
    /// Gaussian standard deviation range in pixels.
    pub sigma: [f64; 2],
    /// Probability of an anisotropic, rotated kernel.
    pub aniso_prob: f64,
    pub resize_prob: f64,
    /// Relative rescale factor range.
    pub resize: [f64; 2],
    pub noise_prob: f64,
    /// Noise standard deviation range on the `[0, 1]` scale.
    pub noise_sigma: [f64; 2],
    /// Probability that noise scales with `sqrt(intensity)`.
    pub signal_dependent_prob: f64,
    pub compress_prob: f64,
    pub quality: [u32; 2],
}

impl DegradeStageConfig {
    pub fn first() -> Self {
        Self {
            blur_prob: 1.0,
            sigma: [0.2, 3.0],
            aniso_prob: 0.5,
            resize_prob: 1.0,
            resize: [0.5, 1.5],
            noise_prob: 1.0,
            noise_sigma: [1.0 / 255.0, 30.0 / 255.0],
            signal_dependent_prob: 0.4,
            compress_prob: 1.0,
            quality: [30, 95],
        }
    }

    pub fn second() -> Self {
        Self {
            blur_prob: 0.8,
            sigma: [0.2, 1.5],
            aniso_prob: 0.5,
            resize_prob: 1.0,
            resize: [0.3, 1.2],
            noise_prob: 1.0,
            noise_sigma: [1.0 / 255.0, 25.0 / 255.0],
            signal_dependent_prob: 0.4,
            compress_prob: 1.0,
            quality: [30, 95],
        }
    }

    /// A stage that never degrades.
    pub fn none() -> Self {
        Self {
            blur_prob: 0.0,
            resize_prob: 0.0,
            noise_prob: 0.0,
            compress_prob: 0.0,
            ..Self::first()
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        let prob = |name: &str, p: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{key}.{name}"), "probability must lie in [0, 1]"));
            }
            Ok(())
        };
        prob("blur_prob", self.blur_prob)?;
        prob("aniso_prob", self.aniso_prob)?;
        prob("resize_prob", self.resize_prob)?;
        prob("noise_prob", self.noise_prob)?;
        prob("signal_dependent_prob", self.signal_dependent_prob)?;
        prob("compress_prob", self.compress_prob)?;
        let range = |name: &str, r: [f64; 2], positive: bool| -> Result<()> {
            let lo_ok = if positive { r[0] > 0.0 } else { r[0] >= 0.0 };
            if !(lo_ok && r[0] <= r[1] && r[1].is_finite()) {
                return Err(Error::config(format!("{key}.{name}"), format!("invalid range {r:?}")));
            }
            Ok(())
        };
        range("sigma", self.sigma, false)?;
        range("resize", self.resize, true)?;
        range("noise_sigma", self.noise_sigma, false)?;
        let [q0, q1] = self.quality;
        if !(1 <= q0 && q0 <= q1 && q1 <= 100) {
            return Err(Error::config(format!("{key}.quality"), "must be an ordered range within [1, 100]"));
        }
        Ok(())
    }
}

/// `degrade.*` configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    /// Final downscale factor.
    pub scale: usize,
    #[serde(default = "DegradeStageConfig::first")]
    pub first: DegradeStageConfig,
    #[serde(default = "DegradeStageConfig::second")]
    pub second: DegradeStageConfig,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            first: DegradeStageConfig::first(),
            second: DegradeStageConfig::second(),
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::config("degrade.scale", "must be at least 1"));
        }
        self.first.validate("degrade.first")?;
        self.second.validate("degrade.second")
    }

    /// No blur, resize, noise or compression: only the final bicubic downscale.
    pub fn identity(scale: usize) -> Self {
        Self {
            scale,
            first: DegradeStageConfig::none(),
            second: DegradeStageConfig::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Rotation in radians.
    pub theta: f64,
    /// Odd side length.
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bilinear,
    Bicubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizeStep {
    pub factor: f64,
    pub mode: ResizeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStep {
    pub sigma: f64,
    pub signal_dependent: bool,
    /// Seed of the per-frame noise fields.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecipe {
    pub blur: Option<BlurKernel>,
    pub resize: Option<ResizeStep>,
    pub noise: Option<NoiseStep>,
    pub quality: Option<u32>,
}

/// Fully resolved degradation: every random choice has been drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub seed: u64,
    pub scale: usize,
    pub stages: [StageRecipe; 2],
}

fn draw_stage(rng: &mut ChaCha8Rng, cfg: &DegradeStageConfig) -> StageRecipe {
    let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
    // Every draw happens unconditionally so one choice never shifts another.
    let blur_on = rng.random::<f64>() < cfg.blur_prob;
    let aniso = rng.random::<f64>() < cfg.aniso_prob;
    let sx = uniform(rng, cfg.sigma);
    let sy_draw = uniform(rng, cfg.sigma);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let resize_on = rng.random::<f64>() < cfg.resize_prob;
    let factor = uniform(rng, cfg.resize);
    let bicubic = rng.random::<bool>();
    let noise_on = rng.random::<f64>() < cfg.noise_prob;
    let noise_sigma = uniform(rng, cfg.noise_sigma);
    let signal_dependent = rng.random::<f64>() < cfg.signal_dependent_prob;
    let noise_seed = rng.random::<u64>();
    let compress_on = rng.random::<f64>() < cfg.compress_prob;
    let quality = rng.random_range(cfg.quality[0]..=cfg.quality[1]);

    let blur = (blur_on && sx > 0.0).then(|| {
        let (sigma_x, sigma_y, theta) = if aniso { (sx, sy_draw.max(1e-3), theta) } else { (sx, sx, 0.0) };
        let radius = (3.0 * sigma_x.max(sigma_y)).ceil().clamp(1.0, 10.0) as usize;
        BlurKernel {
            sigma_x,
            sigma_y,
            theta,
            size: 2 * radius + 1,
        }
    });
    StageRecipe {
        blur,
        resize: resize_on.then_some(ResizeStep {
            factor,
            mode: if bicubic { ResizeMode::Bicubic } else { ResizeMode::Bilinear },
        }),
        noise: (noise_on && noise_sigma > 0.0).then_some(NoiseStep {
            sigma: noise_sigma,
            signal_dependent,
            seed: noise_seed,
        }),
        quality: compress_on.then_some(quality),
    }
}

pub fn make_recipe(cfg: &DegradeConfig, seed: u64) -> Result<DegradationRecipe> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = draw_stage(&mut rng, &cfg.first);
    let second = draw_stage(&mut rng, &cfg.second);
    Ok(DegradationRecipe {
        seed,
        scale: cfg.scale,
        stages: [first, second],
    })
}

/// Normalized kernel weights, row-major `size x size`.
pub fn kernel_weights(k: &BlurKernel) -> Vec<f64> {
    let r = (k.size / 2) as isize;
    let (c, s) = (k.theta.cos(), k.theta.sin());
    let mut w = Vec::with_capacity(k.size * k.size);
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (dx as f64, dy as f64);
            let u = c * x + s * y;
            let v = -s * x + c * y;
            w.push((-0.5 * (u * u / (k.sigma_x * k.sigma_x) + v * v / (k.sigma_y * k.sigma_y))).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Convolution with edge-replicated borders.
pub fn blur_frame(frame: &Frame, k: &BlurKernel) -> Result<Frame> {
    let weights = kernel_weights(k);
    let r = (k.size / 2) as isize;
    let (h, w) = (frame.height(), frame.width());
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let src = frame.channel(c);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                let mut i = 0;
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += weights[i] * src[yy * w + xx] as f64;
                        i += 1;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Frame::from_clamped(h, w, out)
}

fn add_noise(frame: &Frame, n: &NoiseStep, stage: usize, index: usize) -> Result<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(n.seed ^ ((stage as u64) << 56) ^ index as u64);
    let data = frame
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let sd = if n.signal_dependent { n.sigma * (v as f64).max(0.0).sqrt() } else { n.sigma };
            (v as f64 + sd * z) as f32
        })
        .collect();
    Frame::from_clamped(frame.height(), frame.width(), data)
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA_TABLE: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99., 99.,
    99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

/// Quantizer steps for `quality` with the usual IJG scaling. No floor at 1
/// is applied, so quality 100 yields all-zero steps (no quantization).
pub fn quant_table(base: &[f64; 64], quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let s = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for (o, b) in out.iter_mut().zip(base) {
        *o = ((b * s + 50.0) / 100.0).floor();
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

fn quantize_plane(plane: &mut [f64], h: usize, w: usize, table: &[f64; 64], basis: &[[f64; 8]; 8]) {
    let mut block = [0.0f64; 64];
    let mut tmp = [0.0f64; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    let yy = (by + y).min(h - 1);
                    let xx = (bx + x).min(w - 1);
                    block[y * 8 + x] = plane[yy * w + xx] - 128.0;
                }
            }
            // Forward 2D DCT: B * X * B^T.
            for k in 0..8 {
                for x in 0..8 {
                    tmp[k * 8 + x] = (0..8).map(|n| basis[k][n] * block[n * 8 + x]).sum();
                }
            }
            for k in 0..8 {
                for l in 0..8 {
                    block[k * 8 + l] = (0..8).map(|n| tmp[k * 8 + n] * basis[l][n]).sum();
                }
            }
            for (c, q) in block.iter_mut().zip(table) {
                if *q > 0.0 {
                    *c = (*c / q).round() * q;
                }
            }
            // Inverse: B^T * C * B.
            for n in 0..8 {
                for l in 0..8 {
                    tmp[n * 8 + l] = (0..8).map(|k| basis[k][n] * block[k * 8 + l]).sum();
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let (yy, xx) = (by + y, bx + x);
                    if yy < h && xx < w {
                        plane[yy * w + xx] = (0..8).map(|l| tmp[y * 8 + l] * basis[l][x]).sum::<f64>() + 128.0;
                    }
                }
            }
        }
    }
}

/// Block-DCT compression surrogate on full-resolution YCbCr.
pub fn compress_frame(frame: &Frame, quality: u32) -> Result<Frame> {
    let (h, w) = (frame.height(), frame.width());
    let n = h * w;
    let (r, g, b) = (frame.channel(0), frame.channel(1), frame.channel(2));
    let mut ycc = vec![vec![0.0f64; n]; 3];
    for i in 0..n {
        let (rr, gg, bb) = (r[i] as f64 * 255.0, g[i] as f64 * 255.0, b[i] as f64 * 255.0);
        ycc[0][i] = 0.299 * rr + 0.587 * gg + 0.114 * bb;
        ycc[1][i] = -0.168_735_892 * rr - 0.331_264_108 * gg + 0.5 * bb + 128.0;
        ycc[2][i] = 0.5 * rr - 0.418_687_589 * gg - 0.081_312_411 * bb + 128.0;
    }
    let basis = dct_basis();
    let luma = quant_table(&LUMA_TABLE, quality);
    let chroma = quant_table(&CHROMA_TABLE, quality);
    for (c, plane) in ycc.iter_mut().enumerate() {
        quantize_plane(plane, h, w, if c == 0 { &luma } else { &chroma }, &basis);
    }
    let mut out = vec![0.0f32; 3 * n];
    for i in 0..n {
        let (y, cb, cr) = (ycc[0][i], ycc[1][i] - 128.0, ycc[2][i] - 128.0);
        out[i] = ((y + 1.402 * cr) / 255.0) as f32;
        out[n + i] = ((y - 0.344_136_286 * cb - 0.714_136_286 * cr) / 255.0) as f32;
        out[2 * n + i] = ((y + 1.772 * cb) / 255.0) as f32;
    }
    Frame::from_clamped(h, w, out)
}

fn apply_frame(frame: &Frame, recipe: &DegradationRecipe, index: usize) -> Result<Frame> {
    let (h, w) = (frame.height(), frame.width());
    let mut x = frame.clone();
    for (s, stage) in recipe.stages.iter().enumerate() {
        if let Some(k) = &stage.blur {
            x = blur_frame(&x, k)?;
        }
        if let Some(r) = &stage.resize {
            let nh = ((x.height() as f64 * r.factor).round() as usize).max(1);
            let nw = ((x.width() as f64 * r.factor).round() as usize).max(1);
            x = match r.mode {
                ResizeMode::Bilinear => resize_bilinear(&x, nh, nw)?,
                ResizeMode::Bicubic => resize_bicubic(&x, nh, nw)?,
            };
        }
        if let Some(n) = &stage.noise {
            x = add_noise(&x, n, s, index)?;
        }
        if let Some(q) = stage.quality {
            x = compress_frame(&x, q)?;
        }
    }
    resize_bicubic(&x, h / recipe.scale, w / recipe.scale)
}

/// Degrades every frame of a clip with the same recipe.
pub fn apply_degradation(clip: &VideoClip, recipe: &DegradationRecipe) -> Result<VideoClip> {
    let (h, w, s) = (clip.height(), clip.width(), recipe.scale);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by the scale {s}")));
    }
    let frames = clip
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| apply_frame(f, recipe, i))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames, clip.fps())
}

pub fn apply_degradation_image(img: &ImageSample, recipe: &DegradationRecipe) -> Result<ImageSample> {
    let clip = apply_degradation(&img.clone().into_clip(), recipe)?;
    Ok(ImageSample(clip.into_frames().remove(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, n: usize) -> VideoClip {
        let frames = (0..n)
            .map(|t| {
                Frame::from_fn(h, w, |c, y, x| {
                    0.5 + 0.4 * ((x as f32 * 0.7 + t as f32).sin() * (y as f32 * 0.45 + c as f32).cos())
                })
                .unwrap()
            })
            .collect();
        VideoClip::new(frames, 30.0).unwrap()
    }

    #[test]
    fn recipes_are_deterministic_and_serialisable() {
        let cfg = DegradeConfig::default();
        let a = make_recipe(&cfg, 11).unwrap();
        assert_eq!(a, make_recipe(&cfg, 11).unwrap());
        let json = serde_json::to_string(&a).unwrap();
        let back: DegradationRecipe = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
        let sigmas: std::collections::BTreeSet<u64> = (0..20)
            .map(|s| make_recipe(&cfg, s).unwrap().stages[0].blur.as_ref().unwrap().sigma_x.to_bits())
            .collect();
        assert!(sigmas.len() > 15);
    }

    #[test]
    fn identity_recipe_is_plain_bicubic() {
        let clip = textured(16, 24, 2);
        let recipe = make_recipe(&DegradeConfig::identity(4), 3).unwrap();
        let out = apply_degradation(&clip, &recipe).unwrap();
        for (o, f) in out.frames().iter().zip(clip.frames()) {
            let want = resize_bicubic(f, 4, 6).unwrap();
            for (a, b) in o.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_range_and_determinism() {
        let clip = textured(40, 40, 3);
        let recipe = make_recipe(&DegradeConfig::default(), 5).unwrap();
        let a = apply_degradation(&clip, &recipe).unwrap();
        assert_eq!((a.len(), a.height(), a.width()), (3, 10, 10));
        assert!(a.frames().iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(a, apply_degradation(&clip, &recipe).unwrap());
        assert!(matches!(apply_degradation(&textured(10, 12, 1), &recipe), Err(Error::Shape(_))));
    }

    #[test]
    fn blur_preserves_mean_with_constant_border() {
        let k = BlurKernel {
            sigma_x: 2.0,
            sigma_y: 0.8,
            theta: 0.6,
            size: 13,
        };
        let frame = Frame::from_fn(40, 40, |c, y, x| {
            if (6..34).contains(&y) && (6..34).contains(&x) {
                ((x * 31 + y * 17 + c * 7) % 23) as f32 / 22.0
            } else {
                0.3
            }
        })
        .unwrap();
        let out = blur_frame(&frame, &k).unwrap();
        let mean = |f: &Frame| f.data().iter().map(|&v| v as f64).sum::<f64>() / f.data().len() as f64;
        assert!((mean(&frame) - mean(&out)).abs() < 1e-3);
    }

    #[test]
    fn quality_100_is_identity() {
        let clip = textured(20, 28, 1);
        let f = &clip.frames()[0];
        let out = compress_frame(f, 100).unwrap();
        for (a, b) in f.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        let coarse = compress_frame(f, 10).unwrap();
        assert!(f.data().iter().zip(coarse.data()).any(|(a, b)| (a - b).abs() > 1.0 / 255.0));
    }

    #[test]
    fn quant_table_scaling() {
        assert_eq!(quant_table(&LUMA_TABLE, 50), LUMA_TABLE);
        assert!(quant_table(&LUMA_TABLE, 100).iter().all(|&q| q == 0.0));
        assert_eq!(quant_table(&LUMA_TABLE, 25)[0], 32.0);
    }
}

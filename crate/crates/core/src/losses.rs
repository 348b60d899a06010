//! Training objectives.
//!
//! Every loss works on candle tensors so it can be differentiated. Images and
//! clips are `(n, 3, h, w)` tensors with values in `[0, 1]`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Frame;
use crate::models::Init;
use crate::nn;

/// `loss.*` configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Perceptual term weight.
    pub lambda1: f64,
    /// Frame-difference term weight.
    pub lambda2: f64,
    /// Seed of the frozen perceptual feature pyramid.
    pub extractor_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            extractor_seed: 1234,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::config("loss.lambda1", "must be a finite value >= 0"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config("loss.lambda2", "must be a finite value >= 0"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn extractor(&self) -> PerceptualExtractor {
        PerceptualExtractor::new(self.extractor_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

/// Frozen random convolution pyramid used in place of a pretrained network.
///
/// Stage 0 is the input itself; each further stage is a 2x average pool
/// (except the first), a same-padded convolution and a ReLU.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    kernel: usize,
    /// `(out, in, weights, bias)` per convolution stage.
    stages: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_kernel(seed, 3)
    }

    /// A pyramid with `k x k` kernels. With `k = 1` the features are
    /// pointwise and the distance is invariant to a shared spatial
    /// permutation of both inputs.
    pub fn with_kernel(seed: u64, kernel: usize) -> Self {
        let mut init = Init::new(seed);
        let mut inp = 3;
        let mut stages = Vec::new();
        for &out in &STAGE_CHANNELS {
            let fan_in = (inp * kernel * kernel) as f64;
            let w = init.normal(out * inp * kernel * kernel, (2.0 / fan_in).sqrt());
            let b = init.normal(out, 0.05);
            stages.push((out, inp, w, b));
            inp = out;
        }
        Self { kernel, stages }
    }

    /// Channel count of every feature map, input stage included.
    pub fn channels(&self) -> Vec<usize> {
        std::iter::once(3).chain(self.stages.iter().map(|s| s.0)).collect()
    }

    /// Feature maps of an `(n, 3, h, w)` batch, one tensor per stage.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (dtype, device) = (x.dtype(), x.device().clone());
        let mut out = vec![x.clone()];
        let mut h = x.clone();
        for (i, (o, inp, w, b)) in self.stages.iter().enumerate() {
            if i > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                if hh >= 2 && ww >= 2 {
                    h = h.avg_pool2d(2)?;
                }
            }
            let w = Tensor::from_slice(w, (*o, *inp, self.kernel, self.kernel), &device)?.to_dtype(dtype)?;
            let b = Tensor::from_slice(b, *o, &device)?.to_dtype(dtype)?;
            h = nn::conv2d(&h, &w, &b)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Argument(format!("shape mismatch: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean of squared differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

const C1: f64 = 1e-6;
const C2: f64 = 1e-6;

/// Structure/texture distance per image of an `(n, 3, h, w)` pair, shape `(n,)`.
///
/// For each feature channel the texture term compares global means and the
/// structure term the global (co)variances; weights are uniform and sum to
/// one so the distance is `1 - sum(a*l + b*s)`, capped at 1.
pub fn dists_like_per_image(x: &Tensor, y: &Tensor, ext: &PerceptualExtractor) -> Result<Tensor> {
    same_shape(x, y)?;
    if x.rank() != 4 {
        return Err(Error::Argument(format!("expected (n, 3, h, w), got {:?}", x.dims())));
    }
    let fx = ext.features(x)?;
    let fy = ext.features(y)?;
    let total: usize = ext.channels().iter().sum();
    let weight = 1.0 / (2.0 * total as f64);
    let n = x.dim(0)?;
    let mut sim = Tensor::zeros(n, x.dtype(), x.device())?;
    for (a, b) in fx.iter().zip(&fy) {
        let (bn, c, h, w) = a.dims4()?;
        let a = a.reshape((bn, c, h * w))?;
        let b = b.reshape((bn, c, h * w))?;
        let ma = a.mean_keepdim(D::Minus1)?;
        let mb = b.mean_keepdim(D::Minus1)?;
        let da = a.broadcast_sub(&ma)?;
        let db = b.broadcast_sub(&mb)?;
        let va = da.sqr()?.mean_keepdim(D::Minus1)?;
        let vb = db.sqr()?.mean_keepdim(D::Minus1)?;
        let cov = (&da * &db)?.mean_keepdim(D::Minus1)?;
        let l = ((&ma * &mb)?.affine(2.0, C1)? / (ma.sqr()? + mb.sqr()?)?.affine(1.0, C1)?)?;
        let s = (cov.affine(2.0, C2)? / (va + vb)?.affine(1.0, C2)?)?;
        sim = (sim + (l + s)?.squeeze(D::Minus1)?.sum(1)?.affine(weight, 0.0)?)?;
    }
    Ok(sim.affine(-1.0, 1.0)?.minimum(1.0)?)
}

/// Batch mean of [`dists_like_per_image`].
pub fn dists_like_tensor(x: &Tensor, y: &Tensor, ext: &PerceptualExtractor) -> Result<Tensor> {
    Ok(dists_like_per_image(x, y, ext)?.mean_all()?)
}

pub fn dists_like(x: &Frame, y: &Frame, ext: &PerceptualExtractor) -> Result<f64> {
    let tx = nn::frames_to_tensor(std::slice::from_ref(x), DType::F64, &Device::Cpu)?;
    let ty = nn::frames_to_tensor(std::slice::from_ref(y), DType::F64, &Device::Cpu)?;
    nn::scalar(&dists_like_tensor(&tx, &ty, ext)?)
}

/// Mean absolute difference between consecutive-frame deltas, averaged over
/// the `n - 1` deltas.
pub fn frame_diff_loss(x_sr: &Tensor, x_hr: &Tensor) -> Result<Tensor> {
    same_shape(x_sr, x_hr)?;
    let n = x_sr.dim(0)?;
    if n < 2 {
        return Err(Error::Argument(format!("frame difference needs at least 2 frames, got {n}")));
    }
    let delta = |x: &Tensor| -> Result<Tensor> { Ok((x.narrow(0, 1, n - 1)? - x.narrow(0, 0, n - 1)?)?) };
    // Every delta has the same size, so the mean over all of them equals the
    // average of the per-delta means.
    Ok((delta(x_sr)? - delta(x_hr)?)?.abs()?.mean_all()?)
}

pub fn stage1_loss(z_sr: &Tensor, z_hr: &Tensor) -> Result<Tensor> {
    mse(z_sr, z_hr)
}

/// A loss value plus its unweighted components, for logging.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: Tensor,
    pub terms: Vec<(&'static str, f64)>,
}

pub fn stage2_image_loss(x_sr: &Tensor, x_hr: &Tensor, w: LossWeights, ext: &PerceptualExtractor) -> Result<LossValue> {
    let m = mse(x_sr, x_hr)?;
    let mut terms = vec![("mse", nn::scalar(&m)?)];
    let mut total = m;
    if w.lambda1 != 0.0 {
        let d = dists_like_tensor(x_sr, x_hr, ext)?;
        terms.push(("dists", nn::scalar(&d)?));
        total = (total + d.affine(w.lambda1, 0.0)?)?;
    }
    Ok(LossValue { total, terms })
}

/// `mse + lambda1 * dists (frame mean) + lambda2 * frame_diff`.
pub fn stage2_video_loss(x_sr: &Tensor, x_hr: &Tensor, w: LossWeights, ext: &PerceptualExtractor) -> Result<LossValue> {
    same_shape(x_sr, x_hr)?;
    let n = x_sr.dim(0)?;
    if n < 2 {
        return Err(Error::Argument(format!("video loss needs at least 2 frames, got {n}")));
    }
    let LossValue { mut total, mut terms } = stage2_image_loss(x_sr, x_hr, w, ext)?;
    if w.lambda2 != 0.0 {
        let fd = frame_diff_loss(x_sr, x_hr)?;
        terms.push(("frame_diff", nn::scalar(&fd)?));
        total = (total + fd.affine(w.lambda2, 0.0)?)?;
    }
    Ok(LossValue { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
    }

    fn rand_t(seed: u64, shape: (usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v = Init::new(seed).normal(n, 0.3).into_iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect();
        t(v, shape)
    }

    fn val(x: &Tensor) -> f64 {
        nn::scalar(x).unwrap()
    }

    #[test]
    fn mse_cases() {
        let a = t(vec![2.0], (1, 1, 1, 1));
        let b = t(vec![0.0], (1, 1, 1, 1));
        assert_eq!(val(&mse(&a, &b).unwrap()), 4.0);
        assert_eq!(val(&mse(&a, &a).unwrap()), 0.0);
        let x = rand_t(1, (2, 3, 5, 4));
        let y = rand_t(2, (2, 3, 5, 4));
        let (xv, yv) = (nn::to_f64_vec(&x).unwrap(), nn::to_f64_vec(&y).unwrap());
        let mut acc = 0.0;
        for i in 0..xv.len() {
            acc += (xv[i] - yv[i]) * (xv[i] - yv[i]);
        }
        assert!((val(&mse(&x, &y).unwrap()) - acc / xv.len() as f64).abs() < 1e-12);
        assert!(matches!(mse(&x, &rand_t(1, (1, 3, 5, 4))), Err(Error::Argument(_))));
    }

    #[test]
    fn dists_basic_properties() {
        let ext = PerceptualExtractor::new(7);
        let x = rand_t(3, (1, 3, 16, 16));
        let y = rand_t(4, (1, 3, 16, 16));
        assert!(val(&dists_like_tensor(&x, &x, &ext).unwrap()).abs() < 1e-7);
        let a = val(&dists_like_tensor(&x, &y, &ext).unwrap());
        let b = val(&dists_like_tensor(&y, &x, &ext).unwrap());
        assert!((a - b).abs() < 1e-7);
        assert!(a > 0.0 && a <= 1.0);
    }

    #[test]
    fn dists_pointwise_extractor_is_permutation_invariant() {
        let ext = PerceptualExtractor::with_kernel(7, 1);
        let x = rand_t(5, (1, 3, 8, 8));
        let y = rand_t(6, (1, 3, 8, 8));
        // Swap 2x2-aligned blocks so average pooling commutes with the permutation.
        let perm = |t: &Tensor| -> Tensor {
            let left = t.narrow(3, 0, 4).unwrap();
            let right = t.narrow(3, 4, 4).unwrap();
            let swapped = Tensor::cat(&[&right, &left], 3).unwrap();
            let top = swapped.narrow(2, 0, 4).unwrap();
            let bottom = swapped.narrow(2, 4, 4).unwrap();
            Tensor::cat(&[&bottom, &top], 2).unwrap()
        };
        let a = val(&dists_like_tensor(&x, &y, &ext).unwrap());
        let b = val(&dists_like_tensor(&perm(&x), &perm(&y), &ext).unwrap());
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn frame_diff_hand_case() {
        let sr = t(vec![0.0, 1.0, 0.0], (3, 1, 1, 1));
        let hr = t(vec![0.0, 0.5, 1.0], (3, 1, 1, 1));
        assert_eq!(val(&frame_diff_loss(&sr, &hr).unwrap()), 1.0);
        let c1 = t(vec![0.3; 3], (3, 1, 1, 1));
        let c2 = t(vec![0.8; 3], (3, 1, 1, 1));
        assert_eq!(val(&frame_diff_loss(&c1, &c2).unwrap()), 0.0);
        assert!(matches!(frame_diff_loss(&t(vec![0.0], (1, 1, 1, 1)), &t(vec![0.0], (1, 1, 1, 1))), Err(Error::Argument(_))));
    }

    #[test]
    fn frame_diff_constant_shift_invariance() {
        let sr = rand_t(8, (4, 3, 4, 4));
        let hr = rand_t(9, (4, 3, 4, 4));
        let a = val(&frame_diff_loss(&sr, &hr).unwrap());
        let b = val(&frame_diff_loss(&(&sr + 0.25).unwrap(), &(&hr + 0.25).unwrap()).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn stage2_losses_compose() {
        let ext = PerceptualExtractor::new(2);
        let x = rand_t(10, (3, 3, 8, 8));
        let y = rand_t(11, (3, 3, 8, 8));
        let w = LossWeights::default();
        let img = stage2_image_loss(&x, &y, w, &ext).unwrap();
        let expect = val(&mse(&x, &y).unwrap()) + val(&dists_like_tensor(&x, &y, &ext).unwrap());
        assert!((val(&img.total) - expect).abs() < 1e-9);
        let vid = stage2_video_loss(&x, &y, w, &ext).unwrap();
        let per_frame: f64 = (0..3)
            .map(|i| val(&dists_like_tensor(&x.narrow(0, i, 1).unwrap(), &y.narrow(0, i, 1).unwrap(), &ext).unwrap()))
            .sum::<f64>()
            / 3.0;
        let expect = val(&mse(&x, &y).unwrap()) + per_frame + val(&frame_diff_loss(&x, &y).unwrap());
        assert!((val(&vid.total) - expect).abs() < 1e-9);
        let names: Vec<_> = vid.terms.iter().map(|t| t.0).collect();
        assert_eq!(names, ["mse", "dists", "frame_diff"]);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
        };
        assert_eq!(val(&stage2_video_loss(&x, &y, zero, &ext).unwrap().total), val(&mse(&x, &y).unwrap()));
        assert_eq!(val(&stage2_image_loss(&x, &x, w, &ext).unwrap().total), 0.0);
    }
}

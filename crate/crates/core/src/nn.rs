//! Small differentiable building blocks on top of candle tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::media::Frame;

/// `x @ w + b` over the last dimension; `w` is stored `(in, out)`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let inner = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
    let rows = x.elem_count() / inner;
    let out = w.dim(1)?;
    let y = x.reshape((rows, inner))?.matmul(w)?.broadcast_add(b)?;
    let mut shape = dims.to_vec();
    *shape.last_mut().unwrap() = out;
    Ok(y.reshape(shape)?)
}

/// Same-padded 2D convolution with bias; `w` is `(out, in, k, k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let k = w.dim(3)?;
    let y = x.conv2d(w, k / 2, 1, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `(b, c, h, w) -> (b, c*r*r, h/r, w/r)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {r}")));
    }
    Ok(x.reshape((b, c, h / r, r, w / r, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * r * r, h / r, w / r))?)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, crr, h, w) = x.dims4()?;
    let c = crr / (r * r);
    Ok(x.reshape((b, c, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, h * r, w * r))?)
}

/// Stacks frames into an `(n, 3, h, w)` tensor.
pub fn frames_to_tensor(frames: &[Frame], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Argument("no frames to stack".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        if f.height() != h || f.width() != w {
            return Err(Error::Shape("frames differ in size".into()));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::from_vec(data, (frames.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Splits an `(n, 3, h, w)` tensor back into frames, clamping into `[0, 1]`.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks_exact(3 * h * w)
        .take(n)
        .map(|chunk| Frame::from_clamped(h, w, chunk.to_vec()))
        .collect()
}

/// Flattens any tensor to `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Sinusoidal embedding of a scalar position, `[sin(p*f_i)..., cos(p*f_i)...]`.
pub fn sincos(position: f64, dim: usize, base: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = base.powf(-(i as f64) / half.max(1) as f64);
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Latent tensor for a clip, `(frames, channels, h / f, w / f)`.
#[derive(Debug, Clone)]
pub struct LatentClip {
    values: Tensor,
    factor: usize,
}

impl LatentClip {
    pub fn new(values: Tensor, factor: usize) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Shape(format!("latent must be rank 4, got {:?}", values.dims())));
        }
        if values.dim(0)? == 0 {
            return Err(Error::Shape("latent clip has no frames".into()));
        }
        if factor == 0 {
            return Err(Error::Argument("latent factor must be positive".into()));
        }
        Ok(Self { values, factor })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// `(frames, channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn frames(&self) -> usize {
        self.dims().0
    }

    /// One frame as a single-frame latent.
    pub fn frame(&self, t: usize) -> Result<LatentClip> {
        LatentClip::new(self.values.narrow(0, t, 1)?, self.factor)
    }

    /// Concatenates latents along the frame axis.
    pub fn stack(parts: &[LatentClip]) -> Result<LatentClip> {
        let first = parts.first().ok_or_else(|| Error::Argument("nothing to stack".into()))?;
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.values).collect();
        LatentClip::new(Tensor::cat(&tensors, 0)?, first.factor)
    }
}

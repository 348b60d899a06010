//! Toy-scale VAE and denoiser standing in for the pretrained backbone, plus
//! checkpoint storage.

mod checkpoint;
mod denoiser;
mod latent;
mod params;
mod vae;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TensorMap, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use latent::LatentClip;
pub use params::{Init, ParamStore};
pub use vae::{TinyVae, VaeConfig};

use crate::config::fingerprint_of;
use crate::error::Result;

/// `model.*` configuration keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.denoiser.validate()
    }

    /// Stable hash of the architecture; a checkpoint only loads into a model
    /// with the same value.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

/// The VAE and denoiser used together by restoration and training.
#[derive(Debug)]
pub struct VsrModels {
    pub config: ModelConfig,
    pub vae: TinyVae,
    pub denoiser: Denoiser,
}

impl VsrModels {
    /// Fresh models; the VAE and denoiser draw from distinct streams of `seed`.
    pub fn new(config: ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let vae = TinyVae::new(config.vae.clone(), dtype, device, seed ^ 0x5641_4500)?;
        let denoiser = Denoiser::new(
            config.denoiser.clone(),
            config.vae.latent_channels,
            dtype,
            device,
            seed ^ 0x4445_4e00,
        )?;
        Ok(Self { config, vae, denoiser })
    }

    /// Independent copy in another precision. The frozen flag carries over.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let vae = TinyVae::from_params(self.config.vae.clone(), self.vae.params().to_dtype(dtype)?);
        let mut denoiser = Denoiser::from_params(
            self.config.denoiser.clone(),
            self.config.vae.latent_channels,
            self.denoiser.params().to_dtype(dtype)?,
        );
        denoiser.set_temporal_attention(self.denoiser.temporal_attention());
        Ok(Self {
            config: self.config.clone(),
            vae,
            denoiser,
        })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.vae.dtype())
    }

    /// All parameters as `f32` host buffers, prefixed `vae.` and `denoiser.`.
    pub fn export(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (k, v) in self.vae.params().export_f32()? {
            out.insert(format!("vae.{k}"), v);
        }
        for (k, v) in self.denoiser.params().export_f32()? {
            out.insert(format!("denoiser.{k}"), v);
        }
        Ok(out)
    }

    /// Inverse of [`VsrModels::export`]; names and shapes must match exactly.
    pub fn import(&self, tensors: &TensorMap) -> Result<()> {
        let mut vae = TensorMap::new();
        let mut den = TensorMap::new();
        for (k, v) in tensors {
            if let Some(rest) = k.strip_prefix("vae.") {
                vae.insert(rest.to_string(), v.clone());
            } else if let Some(rest) = k.strip_prefix("denoiser.") {
                den.insert(rest.to_string(), v.clone());
            } else {
                return Err(crate::Error::Incompatible(format!("unexpected tensor `{k}`")));
            }
        }
        self.vae.params().import_f32(&vae)?;
        self.denoiser.params().import_f32(&den)
    }
}

//! Noise schedule tables and the single v-prediction denoising step.
//!
//! The low-resolution latent is treated directly as the noised latent at a
//! fixed timestep; no noise is ever sampled. One step of
//!
//! ```text
//! z_sr = sqrt(abar_t) * z_lr - sqrt(1 - abar_t) * v
//! ```
//!
//! turns the denoiser's velocity prediction `v` into the restored latent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LatentClip;

/// `diffusion.*` configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Total number of schedule steps.
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// The fixed denoising timestep, 1-based.
    pub t_star: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            t_star: 399,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::config("diffusion.T", "must be at least 1"));
        }
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(Error::config("diffusion.beta_start", "must lie in (0, 1)"));
        }
        if !(self.beta_end >= self.beta_start && self.beta_end < 1.0) {
            return Err(Error::config("diffusion.beta_end", "must lie in [beta_start, 1)"));
        }
        if self.t_star == 0 || self.t_star > self.num_steps {
            return Err(Error::config("diffusion.t_star", format!("must lie in 1..={}", self.num_steps)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }

    pub fn timestep(&self, schedule: &NoiseSchedule) -> Result<Timestep> {
        Timestep::new(self.t_star, schedule)
    }
}

/// A 1-based timestep known to be valid for the schedule it was built against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Timestep(usize);

impl Timestep {
    pub fn new(t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if t == 0 || t > schedule.len() {
            return Err(Error::Index {
                index: t,
                max: schedule.len(),
            });
        }
        Ok(Self(t))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// `beta`, `alpha = 1 - beta`, and the running product `abar`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `num_steps`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Argument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Argument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (num_steps - 1) as f64;
            (0..num_steps).map(|i| beta_start + step * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Builds the tables from an explicit beta sequence, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Argument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Argument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: Timestep) -> f64 {
        self.alpha_bars[t.0 - 1]
    }

    /// Checked lookup for a raw 1-based index.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(Timestep::new(t, self)?))
    }
}

/// `sqrt(abar_t) * z_lr - sqrt(1 - abar_t) * v`, elementwise.
pub fn one_step_denoise(
    z_lr: &LatentClip,
    v: &LatentClip,
    schedule: &NoiseSchedule,
    t: Timestep,
) -> Result<LatentClip> {
    if z_lr.dims() != v.dims() {
        return Err(Error::Argument(format!(
            "latent {:?} and prediction {:?} differ in shape",
            z_lr.dims(),
            v.dims()
        )));
    }
    denoise_with_alpha_bar(z_lr, v, schedule.alpha_bar(t))
}

pub(crate) fn denoise_with_alpha_bar(z_lr: &LatentClip, v: &LatentClip, abar: f64) -> Result<LatentClip> {
    let out = (z_lr.values().affine(abar.sqrt(), 0.0)? - v.values().affine((1.0 - abar).sqrt(), 0.0)?)?;
    LatentClip::new(out, z_lr.factor())
}

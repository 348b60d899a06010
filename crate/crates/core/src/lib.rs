pub mod config;
pub mod curator;
pub mod diffusion;
pub mod error;
pub mod media;
pub mod models;
pub mod nn;

pub use error::{Error, LoadError, Result};
pub mod losses;
pub mod metrics;
pub mod restorer;
pub mod synth;
pub mod trainer;
pub mod workflow;
pub mod degradation;

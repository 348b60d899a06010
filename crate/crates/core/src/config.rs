//! Run configuration and fingerprints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curator::CurationConfig;
use crate::degradation::DegradeConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::EvalConfig;
use crate::models::ModelConfig;
use crate::trainer::TrainConfig;

/// Environment variable that replaces the config seed.
pub const SEED_ENV: &str = "DOVE_SEED";

/// `io.*` keys: data locations and restore-time settings. Command-line
/// flags take precedence over these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Super-resolution factor; must equal `degrade.scale`.
    pub scale: usize,
    /// Frames per denoiser call when restoring; 0 picks the largest chunk
    /// that fits the token budget.
    pub chunk_frames: usize,
    /// HR training clips (one frame directory per clip).
    pub train_hr: Option<PathBuf>,
    /// LR counterparts, matched by directory name.
    pub train_lr: Option<PathBuf>,
    /// HR image set for stage 2; every frame of every clip is one image.
    pub image_hr: Option<PathBuf>,
    pub image_lr: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            chunk_frames: 0,
            train_hr: None,
            train_lr: None,
            image_hr: None,
            image_lr: None,
        }
    }
}

/// Every tunable of a run, one section per component.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub degrade: DegradeConfig,
    pub curate: CurationConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.diffusion.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.degrade.validate()?;
        self.curate.validate()?;
        self.eval.validate()?;
        if self.io.scale == 0 {
            return Err(Error::config("io.scale", "must be at least 1"));
        }
        if self.io.scale != self.degrade.scale {
            return Err(Error::config(
                "io.scale",
                format!("{} differs from degrade.scale = {}", self.io.scale, self.degrade.scale),
            ));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }

    /// Parses TOML text; missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let message = e.inner().message().to_string();
            Error::config(if key == "." { "<root>".to_string() } else { key }, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    /// Replaces the seed with `DOVE_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// Reads, fills defaults and validates a config file, then applies
/// `DOVE_SEED`.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    cfg.apply_seed_env()?;
    Ok(cfg)
}

/// Flattens a serialisable value into sorted `dotted.key=value` lines.
pub fn normalized_pairs<T: Serialize>(value: &T) -> Vec<String> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => out.push(format!("{prefix}={other}")),
        }
    }
    let json = serde_json::to_value(value).expect("config types serialise to JSON");
    let mut out = Vec::new();
    walk("", &json, &mut out);
    out.sort();
    out
}

/// Hex SHA-256 over the normalized key-value lines.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let mut h = Sha256::new();
    for line in normalized_pairs(value) {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

//! Named-tensor archive.
//!
//! Layout: the 8 magic bytes `DOVEckpt`, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the JSON manifest, then every tensor
//! payload as little-endian `f32` in manifest order (parameters first, then
//! optimizer state).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, VsrModels};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DOVEckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Tensor name to `(shape, values)`.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    stage: u8,
    seed: u64,
    model_config: ModelConfig,
    model_fingerprint: String,
    run_fingerprint: String,
    tensors: Vec<TensorEntry>,
    optimizer: Vec<TensorEntry>,
    extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// 0 for a pretrained VAE only, 1 or 2 after the matching training stage.
    pub stage: u8,
    pub seed: u64,
    pub model_config: ModelConfig,
    /// Fingerprint of the full run configuration that produced the file.
    pub run_fingerprint: String,
    pub params: TensorMap,
    pub optimizer: TensorMap,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_models(models: &VsrModels, step: u64, stage: u8, seed: u64, run_fingerprint: &str) -> Result<Self> {
        Ok(Self {
            step,
            stage,
            seed,
            model_config: models.config.clone(),
            run_fingerprint: run_fingerprint.to_string(),
            params: models.export()?,
            optimizer: TensorMap::new(),
            extra: serde_json::Value::Null,
        })
    }

    pub fn model_fingerprint(&self) -> String {
        self.model_config.fingerprint()
    }

    /// Fails with an incompatibility error unless the checkpoint was written
    /// for the architecture `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let (want, got) = (config.fingerprint(), self.model_fingerprint());
        if want != got {
            return Err(Error::Incompatible(format!(
                "model fingerprint {got} does not match the configured model {want}"
            )));
        }
        Ok(())
    }

    /// Copies the stored parameters into `models` after a compatibility check.
    pub fn apply_to(&self, models: &VsrModels) -> Result<()> {
        self.check_compatible(&models.config)?;
        models.import(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = |map: &TensorMap| -> Result<Vec<TensorEntry>> {
            map.iter()
                .map(|(name, (shape, data))| {
                    if shape.iter().product::<usize>() != data.len() {
                        return Err(Error::Shape(format!("tensor `{name}` has {} values for shape {shape:?}", data.len())));
                    }
                    Ok(TensorEntry {
                        name: name.clone(),
                        shape: shape.clone(),
                        dtype: "f32".into(),
                        nbytes: 4 * data.len() as u64,
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            step: self.step,
            stage: self.stage,
            seed: self.seed,
            model_config: self.model_config.clone(),
            model_fingerprint: self.model_fingerprint(),
            run_fingerprint: self.run_fingerprint.clone(),
            tensors: entries(&self.params)?,
            optimizer: entries(&self.optimizer)?,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let payload: usize = self.params.values().chain(self.optimizer.values()).map(|(_, d)| 4 * d.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in self.params.values().chain(self.optimizer.values()) {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Corrupt("file shorter than the header".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(Error::Corrupt("manifest truncated".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| Error::Corrupt(format!("unreadable manifest: {e}")))?;
        if manifest.model_fingerprint != manifest.model_config.fingerprint() {
            return Err(Error::Corrupt("manifest fingerprint does not match its model config".into()));
        }
        let mut cursor = &body[mlen..];
        let mut take = |entries: &[TensorEntry]| -> Result<TensorMap> {
            let mut map = TensorMap::new();
            for e in entries {
                if e.dtype != "f32" {
                    return Err(Error::Incompatible(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
                }
                let count: usize = e.shape.iter().product();
                if e.nbytes != 4 * count as u64 {
                    return Err(Error::Corrupt(format!("tensor `{}` size disagrees with its shape", e.name)));
                }
                let n = e.nbytes as usize;
                if cursor.len() < n {
                    return Err(Error::Corrupt(format!("payload of `{}` truncated", e.name)));
                }
                let data = cursor[..n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                cursor = &cursor[n..];
                map.insert(e.name.clone(), (e.shape.clone(), data));
            }
            Ok(map)
        };
        let params = take(&manifest.tensors)?;
        let optimizer = take(&manifest.optimizer)?;
        if !cursor.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes after the payload", cursor.len())));
        }
        Ok(Self {
            step: manifest.step,
            stage: manifest.stage,
            seed: manifest.seed,
            model_config: manifest.model_config,
            run_fingerprint: manifest.run_fingerprint,
            params,
            optimizer,
            extra: manifest.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Names listed in the manifest, parameters only.
    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }
}

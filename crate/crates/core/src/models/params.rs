use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable tensors, ordered by name.
///
/// A frozen store hands out detached tensors so no gradient is tracked
/// through it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    frozen: bool,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            frozen: false,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        Ok(if self.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copy with every tensor cast to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?);
        }
        Ok(Self {
            dtype,
            device: self.device.clone(),
            frozen: self.frozen,
            vars,
        })
    }

    /// Deep copy (fresh storage).
    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    /// All tensors as `f32` host buffers with their shapes.
    pub fn export_f32(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            let t = v.as_tensor();
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            out.insert(k.clone(), (t.dims().to_vec(), data));
        }
        Ok(out)
    }

    /// Replaces the value of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` is {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Loads from host buffers; the set of names and shapes must match exactly.
    pub fn import_f32(&self, tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        if tensors.len() != self.vars.len() || tensors.keys().any(|k| !self.vars.contains_key(k)) {
            return Err(Error::Incompatible("parameter names differ from the model".into()));
        }
        for (name, (shape, data)) in tensors {
            let var = &self.vars[name];
            if var.dims() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` is {:?} in the model but {:?} in the checkpoint",
                    var.dims(),
                    shape
                )));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("std is finite");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    pub fn zeros(n: usize) -> Vec<f64> {
        vec![0.0; n]
    }

    pub fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }
}

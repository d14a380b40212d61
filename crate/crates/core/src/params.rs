//! Named, seeded parameter storage.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Parameters keyed by dotted names, created on first request.
///
/// Initial values come from a ChaCha8 stream, so a model built with the same
/// seed and the same construction order is bit-identical. Tensors whose name
/// starts with a frozen prefix are handed out detached from the graph.
/// A store filled from a checkpoint is strict: requesting a name it does not
/// hold is an error instead of a fresh initialization.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    requested: BTreeSet<String>,
    strict: bool,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
            requested: BTreeSet::new(),
            strict: false,
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A strict store holding the checkpoint's tensors, cast to `dtype`.
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let mut store = Self::new(0, dtype);
        for (name, t) in &ckpt.tensors {
            let tensor = Tensor::from_slice(&t.data, t.shape.as_slice(), &store.device)?.to_dtype(dtype)?;
            store.vars.insert(name.clone(), Var::from_tensor(&tensor)?);
        }
        store.strict = true;
        Ok(store)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Marks every parameter whose name starts with `prefix` as frozen,
    /// including ones created later.
    pub fn freeze(&mut self, prefix: &str) {
        self.frozen.insert(prefix.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Returns the parameter `name`, creating it with `init` if needed.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.requested.insert(name.to_string());
        let var = match self.vars.get(name) {
            Some(var) => {
                if var.dims() != shape {
                    return Err(CoreError::ShapeMismatch(format!(
                        "parameter `{name}` has shape {:?}, model expects {shape:?}",
                        var.dims()
                    )));
                }
                var.clone()
            }
            None if self.strict => return Err(CoreError::MissingTensor(name.to_string())),
            None => {
                let numel: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; numel],
                    Init::Const(c) => vec![c; numel],
                    Init::Normal(std) => (0..numel)
                        .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    Init::Uniform(b) => (0..numel).map(|_| self.rng.random_range(-b..=b)).collect(),
                };
                let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
                let var = Var::from_tensor(&t)?;
                self.vars.insert(name.to_string(), var.clone());
                var
            }
        };
        Ok(if self.is_frozen(name) {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    /// Names held by the store that no model component asked for.
    pub fn unrequested(&self) -> Vec<String> {
        self.vars
            .keys()
            .filter(|k| !self.requested.contains(*k))
            .cloned()
            .collect()
    }

    /// Errors with [`CoreError::UnknownTensor`] if a loaded tensor was never used.
    pub fn ensure_all_requested(&self) -> Result<()> {
        match self.unrequested().into_iter().next() {
            Some(name) => Err(CoreError::UnknownTensor(name)),
            None => Ok(()),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(&str, &Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| !self.is_frozen(k))
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; every layer holding it sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| CoreError::MissingTensor(name.to_string()))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Fills the selected parameters with N(0, std²) draws from `seed`.
    pub fn randomize(&self, filter: impl Fn(&str) -> bool, std: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in &self.vars {
            if !filter(name) {
                continue;
            }
            let values: Vec<f64> = (0..var.elem_count())
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            var.set(&Tensor::from_vec(values, var.dims(), &self.device)?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Snapshot of all parameters as a checkpoint (values cast to f32).
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(metadata);
        for (name, var) in &self.vars {
            ckpt.insert_tensor(name, var.as_tensor())?;
        }
        Ok(ckpt)
    }

    /// Copies values from `ckpt` into existing parameters; every parameter
    /// must be present with a matching shape.
    pub fn load_values(&self, ckpt: &Checkpoint) -> Result<()> {
        for name in ckpt.tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(CoreError::UnknownTensor(name.clone()));
            }
        }
        for (name, var) in &self.vars {
            let t = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| CoreError::MissingTensor(name.clone()))?;
            if t.shape != var.dims() {
                return Err(CoreError::ShapeMismatch(format!(
                    "tensor `{name}`: checkpoint {:?}, model {:?}",
                    t.shape,
                    var.dims()
                )));
            }
            let value = Tensor::from_slice(&t.data, t.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&value)?;
        }
        Ok(())
    }
}

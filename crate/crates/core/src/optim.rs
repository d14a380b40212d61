//! Adam with bias correction and a cosine-annealed learning rate.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::params::ParamStore;

/// Cosine annealing from `base` at step 0 to `min` at step `total − 1`.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = (step.min(total - 1)) as f64 / (total - 1) as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter of `store` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = if weight_decay != 0.0 {
                (g + (var.as_tensor().detach() * weight_decay)?)?
            } else {
                g.clone()
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, mut metadata: serde_json::Value) -> Result<Checkpoint> {
        if let Some(obj) = metadata.as_object_mut() {
            obj.insert("adam_t".into(), self.t.into());
        }
        let mut ckpt = Checkpoint::new(metadata);
        for (name, m) in &self.m {
            ckpt.insert_tensor(&format!("m.{name}"), m)?;
        }
        for (name, v) in &self.v {
            ckpt.insert_tensor(&format!("v.{name}"), v)?;
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(cfg: AdamConfig, ckpt: &Checkpoint, store: &ParamStore) -> Result<Self> {
        let t = ckpt
            .metadata
            .get("adam_t")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CoreError::CorruptCheckpoint("optimizer state lacks `adam_t`".into()))?;
        let mut adam = Self::new(cfg);
        adam.t = t;
        for (key, stored) in &ckpt.tensors {
            let (slot, name) = key
                .split_once('.')
                .ok_or_else(|| CoreError::CorruptCheckpoint(format!("optimizer tensor `{key}`")))?;
            if store.var(name).is_none() {
                return Err(CoreError::UnknownTensor(name.to_string()));
            }
            let tensor = stored.to_tensor(store.dtype())?;
            match slot {
                "m" => adam.m.insert(name.to_string(), tensor),
                "v" => adam.v.insert(name.to_string(), tensor),
                _ => return Err(CoreError::CorruptCheckpoint(format!("optimizer tensor `{key}`"))),
            };
        }
        Ok(adam)
    }
}

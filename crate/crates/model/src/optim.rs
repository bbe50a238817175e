//! Adam with cosine learning-rate decay and global gradient-norm clipping.
//!
//! Moment estimates are kept per parameter name so optimizer state can be
//! checkpointed and restored alongside the parameters.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Cosine decay from `lr` at step 0 to 0 at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let p = (step as f64 / total as f64).min(1.0);
    0.5 * lr * (1.0 + (std::f64::consts::PI * p).cos())
}

pub struct Adam {
    params: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: usize,
    pub config: AdamConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub grad_norm: f64,
    pub lr: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { params, m, v, step: 0, config })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Global L2 norm of the gradients of the managed parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`; gradients are clipped to the
    /// configured global norm first. Non-finite gradients are rejected.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<StepStats> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(ModelError::Divergence { step: self.step, msg: format!("gradient norm is {norm}") });
        }
        let clip = if norm > self.config.clip_norm { self.config.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g * clip)?;
            let m = self.m.get_mut(name).expect("state exists");
            let v = self.v.get_mut(name).expect("state exists");
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let mhat = (&*m / bc1)?;
            let vhat = (&*v / bc2)?;
            let upd = (mhat / (vhat.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor() - (upd * lr)?)?)?;
        }
        Ok(StepStats { grad_norm: norm, lr })
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        for (name, var) in &self.params {
            for (prefix, map) in [("m", &mut self.m), ("v", &mut self.v)] {
                let t = state
                    .get(&format!("{prefix}.{name}"))
                    .ok_or_else(|| ModelError::Checkpoint(format!("optimizer state missing {prefix}.{name}")))?;
                if t.dims() != var.dims() {
                    return Err(ModelError::Checkpoint(format!("optimizer state {prefix}.{name} has wrong shape")));
                }
                map.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        self.step = step;
        Ok(())
    }
}

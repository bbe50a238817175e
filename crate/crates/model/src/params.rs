//! Named, seeded parameter storage.
//!
//! Every parameter is a `Var` keyed by a dotted path. Initial values are drawn
//! from a ChaCha stream seeded by the store's init seed mixed with a hash of
//! the name, so a parameter's starting value depends only on `(seed, name)`
//! and is identical between `f32` and `f64` stores up to rounding.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ModelError, Result};
use motionflow_core::rng::{fnv1a, substream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// Shared handle to a set of named parameters.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let g = self.inner.lock().unwrap();
        f.debug_struct("ParamStore").field("params", &g.vars.len()).field("dtype", &g.dtype).finish()
    }
}

fn init_values(seed: u64, name: &str, n: usize, init: Init) -> Vec<f64> {
    let mut rng = substream(seed, "init", &[fnv1a(name.as_bytes())]);
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                std * e
            })
            .collect(),
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self { inner: Arc::new(Mutex::new(Inner { vars: BTreeMap::new(), seed, dtype, device: device.clone() })) }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.lock().unwrap().device.clone()
    }

    /// Returns the parameter `name`, creating it on first use.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut g = self.inner.lock().unwrap();
        if let Some(v) = g.vars.get(name) {
            if v.dims() != shape {
                return Err(ModelError::Shape(format!("parameter {name} has shape {:?}, requested {shape:?}", v.dims())));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let vals = init_values(g.seed, name, n, init);
        let t = Tensor::from_vec(vals, shape, &g.device)?.to_dtype(g.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        g.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn scope(&self, prefix: &str) -> Scope {
        Scope { store: self.clone(), prefix: prefix.to_string() }
    }

    /// All parameters, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner.lock().unwrap().vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars().into_iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))).collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Current values as plain tensors (detached copies).
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars().into_iter().map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?))).collect()
    }

    /// Overwrites existing parameters from `values`; every stored parameter
    /// must be present with a matching shape.
    pub fn load_values(&self, values: &BTreeMap<String, Tensor>, prefixes: &[&str]) -> Result<()> {
        for (name, var) in self.vars_with_prefix(prefixes) {
            let src = values.get(&name).ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn save_safetensors(&self, path: impl AsRef<Path>, prefixes: &[&str]) -> Result<()> {
        let map: BTreeMap<String, Tensor> = self.vars_with_prefix(prefixes).into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect();
        candle_core::safetensors::save(&map.into_iter().collect(), path.as_ref())?;
        Ok(())
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn sub(&self, name: &str) -> Scope {
        Scope { store: self.store.clone(), prefix: self.path(name) }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&self.path(name), shape, init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }
}

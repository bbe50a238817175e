//! Fusion of the dequantized token latent and the continuous latent.
//!
//! The two parts are concatenated and refined by pre-norm residual MLP
//! blocks. Every block's output projection starts at zero, so an untrained
//! network returns the concatenation unchanged.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub blocks: usize,
    /// Hidden width as a multiple of `d_total`.
    pub hidden_mult: usize,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self { blocks: 2, hidden_mult: 2 }
    }
}

struct Block {
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct Coupling {
    blocks: Vec<Block>,
    d_q: usize,
    d_c: usize,
}

impl Coupling {
    pub fn new(s: &Scope, cfg: &CouplingConfig, d_q: usize, d_c: usize) -> Result<Self> {
        let d = d_q + d_c;
        let hidden = cfg.hidden_mult.max(1) * d;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let b = s.sub(&format!("block{i}"));
                Ok(Block {
                    ln: LayerNorm::new(&b.sub("ln"), d)?,
                    fc1: Linear::new(&b.sub("fc1"), d, hidden)?,
                    fc2: Linear::with_init(&b.sub("fc2"), hidden, d, Init::Zeros, Init::Zeros)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks, d_q, d_c })
    }

    /// `z_q_hat`: `[.., n, d_q]` (may be absent when `d_q = 0`), `z_c`:
    /// `[.., n, d_c]` -> `[.., n, d_q + d_c]`.
    pub fn forward(&self, z_q_hat: Option<&Tensor>, z_c: &Tensor) -> Result<Tensor> {
        let last = z_c.rank() - 1;
        if z_c.dim(last)? != self.d_c {
            return Err(ModelError::Shape(format!("continuous part has width {}, expected {}", z_c.dim(last)?, self.d_c)));
        }
        let mut h = match z_q_hat {
            Some(q) => {
                if q.dims()[..last] != z_c.dims()[..last] {
                    return Err(ModelError::Shape(format!(
                        "token part {:?} and continuous part {:?} differ in length",
                        q.dims(),
                        z_c.dims()
                    )));
                }
                if q.dim(last)? != self.d_q {
                    return Err(ModelError::Shape(format!("token part has width {}, expected {}", q.dim(last)?, self.d_q)));
                }
                Tensor::cat(&[q, z_c], last)?
            }
            None if self.d_q == 0 => z_c.clone(),
            None => return Err(ModelError::Shape("token part missing".into())),
        };
        for b in &self.blocks {
            let y = b.fc2.forward(&b.fc1.forward(&b.ln.forward(&h)?)?.gelu()?)?;
            h = (h + y)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn identity_at_init_and_shape_errors() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let c = Coupling::new(&s.scope("c"), &CouplingConfig::default(), 2, 6).unwrap();
        let q = Tensor::arange(0f64, 6.0, &Device::Cpu).unwrap().reshape((1, 3, 2)).unwrap();
        let z = Tensor::arange(0f64, 18.0, &Device::Cpu).unwrap().reshape((1, 3, 6)).unwrap();
        let out = c.forward(Some(&q), &z).unwrap();
        let cat = Tensor::cat(&[&q, &z], 2).unwrap();
        assert_eq!(out.to_vec3::<f64>().unwrap(), cat.to_vec3::<f64>().unwrap());
        let short = z.narrow(1, 0, 2).unwrap();
        assert!(c.forward(Some(&q), &short).is_err());
    }
}

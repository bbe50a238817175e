//! Reconstruction and kinematic losses on padded motion batches.
//!
//! Positions are `[B, T, J·3]`; `mask` is `[B, T]`. Finite-difference terms
//! only use windows whose frames are all valid.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::scalar;
use motionflow_core::dataset::Normalization;

/// Mean over valid frames and channels of the squared error.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let c = pred.dim(D::Minus1)? as f64;
    let per = (pred - target)?.sqr()?.sum(D::Minus1)?;
    Ok((per.mul(mask)?.sum_all()? / (mask.sum_all()? * c)?)?)
}

/// Mean over valid (frame, joint) of the squared joint distance.
pub fn joint_sq_error(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, t, c) = pred.dims3()?;
    if c % 3 != 0 {
        return Err(ModelError::Shape(format!("{c} channels is not a multiple of 3")));
    }
    let j = c / 3;
    let d2 = (pred - target)?.sqr()?.reshape((b, t, j, 3))?.sum(D::Minus1)?;
    let per_frame = d2.sum(D::Minus1)?;
    Ok((per_frame.mul(mask)?.sum_all()? / (mask.sum_all()? * j as f64)?)?)
}

/// `k`-th forward difference along time and the matching window mask.
pub fn time_difference(x: &Tensor, mask: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let mut x = x.clone();
    let mut m = mask.clone();
    for _ in 0..k {
        let t = x.dim(1)?;
        if t < 2 {
            return Err(ModelError::Shape("sequence too short for finite differences".into()));
        }
        x = (x.narrow(1, 1, t - 1)? - x.narrow(1, 0, t - 1)?)?;
        m = m.narrow(1, 1, t - 1)?.mul(&m.narrow(1, 0, t - 1)?)?;
    }
    Ok((x, m))
}

fn diff_loss(pred: &Tensor, target: &Tensor, mask: &Tensor, k: usize) -> Result<Tensor> {
    let (dp, m) = time_difference(pred, mask, k)?;
    let (dt, _) = time_difference(target, mask, k)?;
    let n = scalar(&m.sum_all()?)?;
    if n == 0.0 {
        return Ok(m.sum_all()?.zeros_like()?);
    }
    joint_sq_error(&dp, &dt, &m)
}

/// Maps normalized frames back to metric joint positions.
pub struct Denormalizer {
    mean: Tensor,
    std: Tensor,
}

impl Denormalizer {
    pub fn new(norm: &Normalization, dtype: DType, device: &Device) -> Result<Self> {
        let c = norm.mean.len();
        Ok(Self {
            mean: Tensor::from_vec(norm.mean.clone(), c, device)?.to_dtype(dtype)?,
            std: Tensor::from_vec(norm.std.clone(), c, device)?.to_dtype(dtype)?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.std)?.broadcast_add(&self.mean)?)
    }
}

/// Kinematic loss components as tensors (for backpropagation).
pub struct KinematicTerms {
    pub fk: Tensor,
    pub vel: Tensor,
    pub acc: Tensor,
    pub jerk: Tensor,
    pub global: Tensor,
}

/// Scalar summary of a batch's kinematic losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KinematicLossReport {
    pub rec: f64,
    pub vel: f64,
    pub acc: f64,
    pub jerk: f64,
    pub global: f64,
    pub fk: f64,
}

/// Metric-space position terms. `pred`/`target` are joint positions in
/// meters, joint 0 is the root.
pub fn kinematic_terms(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<KinematicTerms> {
    let root_p = pred.narrow(2, 0, 3)?;
    let root_t = target.narrow(2, 0, 3)?;
    Ok(KinematicTerms {
        fk: joint_sq_error(pred, target, mask)?,
        vel: diff_loss(pred, target, mask, 1)?,
        acc: diff_loss(pred, target, mask, 2)?,
        jerk: diff_loss(pred, target, mask, 3)?,
        global: joint_sq_error(&root_p, &root_t, mask)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn affine_motion_has_zero_jerk() {
        let t = 8;
        let v: Vec<f64> = (0..t).flat_map(|i| [i as f64 * 0.1, 1.0, 2.0 - i as f64 * 0.05]).collect();
        let x = Tensor::from_vec(v, (1, t, 3), &Device::Cpu).unwrap();
        let zero = x.zeros_like().unwrap();
        let mask = Tensor::ones((1, t), candle_core::DType::F64, &Device::Cpu).unwrap();
        let (j, _) = time_difference(&x, &mask, 3).unwrap();
        assert!(scalar(&j.abs().unwrap().max_all().unwrap()).unwrap() < 1e-12);
        let terms = kinematic_terms(&x, &x, &mask).unwrap();
        for v in [terms.fk, terms.vel, terms.acc, terms.jerk, terms.global] {
            assert_eq!(scalar(&v).unwrap(), 0.0);
        }
        let terms = kinematic_terms(&x, &zero, &mask).unwrap();
        assert!(scalar(&terms.jerk).unwrap() < 1e-20);
        assert!(scalar(&terms.vel).unwrap() > 0.0);
    }
}

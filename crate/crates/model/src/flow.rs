//! Rectified-flow training target and the guided Euler sampler.

use candle_core::{DType, Device, Tensor, D};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::flow_head::{FlowHead, TextCache, TextCondition};
use crate::nn::{scalar, Ctx};
use motionflow_core::rng::substream;

fn time_tensor(t: &[f64], like: &Tensor) -> Result<Tensor> {
    let b = like.dim(0)?;
    if t.len() != b {
        return Err(ModelError::Shape(format!("{} times for batch {b}", t.len())));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(ModelError::Validation(format!("time {bad} is outside [0, 1]")));
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_vec(t.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

/// `z_t = t z1 + (1 - t) z0` with one `t` per batch element.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if z0.dims() != z1.dims() {
        return Err(ModelError::Shape(format!("interpolation endpoints {:?} and {:?}", z0.dims(), z1.dims())));
    }
    let tt = time_tensor(t, z0)?;
    let one_minus = (1.0 - &tt)?;
    Ok((z1.broadcast_mul(&tt)? + z0.broadcast_mul(&one_minus)?)?)
}

/// `u = z1 - z0`.
pub fn velocity_target(z0: &Tensor, z1: &Tensor) -> Result<Tensor> {
    if z0.dims() != z1.dims() {
        return Err(ModelError::Shape("velocity endpoints differ in shape".into()));
    }
    Ok((z1 - z0)?)
}

/// Mean over valid positions `[B, n]` of the channel-summed squared error.
pub fn fm_loss(v_hat: &Tensor, u: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if v_hat.dims() != u.dims() {
        return Err(ModelError::Shape("prediction and target differ in shape".into()));
    }
    let per = (v_hat - u)?.sqr()?.sum(D::Minus1)?;
    Ok((per.mul(mask)?.sum_all()? / mask.sum_all()?)?)
}

/// `v_uncond + s (v_cond - v_uncond)`.
pub fn cfg_combine(v_uncond: &Tensor, v_cond: &Tensor, s: f64) -> Result<Tensor> {
    Ok((v_uncond + ((v_cond - v_uncond)? * s)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 40, guidance: 2.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(ModelError::Config("sampler.steps must be >= 1".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(ModelError::Config("sampler.guidance must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Standard normal prior draw for request `request` under `seed`.
pub fn prior_sample(shape: &[usize], seed: u64, request: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = substream(seed, "sample", &[request]);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// A velocity field evaluated with and without conditioning.
pub trait GuidedField {
    /// `(v_uncond, v_cond)` at state `z` and time `t`.
    fn eval(&mut self, z: &Tensor, t: f64) -> Result<(Tensor, Tensor)>;
}

/// Fixed-step Euler integration from `t = 0` to `1` with guidance. Padded
/// positions (`mask = 0`) are re-zeroed after every step.
pub fn euler_sample(field: &mut dyn GuidedField, z0: &Tensor, mask: &Tensor, cfg: &SamplerConfig) -> Result<Tensor> {
    cfg.validate()?;
    let m = mask.unsqueeze(D::Minus1)?;
    let mut z = z0.broadcast_mul(&m)?;
    let dt = 1.0 / cfg.steps as f64;
    for k in 0..cfg.steps {
        let t = k as f64 / cfg.steps as f64;
        let (vu, vc) = field.eval(&z, t)?;
        let v = cfg_combine(&vu, &vc, cfg.guidance)?;
        // Detached so the graph of earlier steps is freed.
        z = (z + (v * dt)?)?.broadcast_mul(&m)?.detach();
        let s = scalar(&z.abs()?.sum_all()?)?;
        if !s.is_finite() {
            return Err(ModelError::Divergence { step: k, msg: "non-finite latent state".into() });
        }
    }
    Ok(z)
}

/// The flow head as a guided field: conditional and null branches run as one
/// batch, text keys/values are cached once.
pub struct HeadField<'a> {
    head: &'a FlowHead,
    text: TextCondition,
    cache: Option<TextCache>,
    mask: Tensor,
    pub evaluations: usize,
}

impl<'a> HeadField<'a> {
    pub fn new(head: &'a FlowHead, cond: &TextCondition, mask: &Tensor, use_cache: bool) -> Result<Self> {
        let text = TextCondition::cat(&cond.null_like()?, cond)?;
        let cache = if use_cache { Some(head.cache_text(&text)?) } else { None };
        let mask = Tensor::cat(&[mask, mask], 0)?;
        Ok(Self { head, text, cache, mask, evaluations: 0 })
    }
}

impl GuidedField for HeadField<'_> {
    fn eval(&mut self, z: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
        let b = z.dim(0)?;
        let zz = Tensor::cat(&[z, z], 0)?;
        let v = self.head.forward(&zz, &vec![t; 2 * b], &self.text, &self.mask, self.cache.as_ref(), Ctx::eval())?;
        self.evaluations += 1;
        Ok((v.narrow(0, 0, b)?, v.narrow(0, b, b)?))
    }
}

/// Per-channel statistics of the flow endpoint, used to standardize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    /// Accumulates over valid positions of `[B, n, d]` latents.
    pub fn fit(latents: &[(Tensor, Tensor)]) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0.0;
        for (z, mask) in latents {
            let zv = z.to_dtype(DType::F64)?.to_vec3::<f64>()?;
            let mv = mask.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            for (zs, ms) in zv.iter().zip(&mv) {
                for (row, &m) in zs.iter().zip(ms) {
                    if m == 0.0 {
                        continue;
                    }
                    if sum.is_empty() {
                        sum = vec![0.0; row.len()];
                        sq = vec![0.0; row.len()];
                    }
                    for (k, v) in row.iter().enumerate() {
                        sum[k] += v;
                        sq[k] += v * v;
                    }
                    count += 1.0;
                }
            }
        }
        if count < 2.0 {
            return Err(ModelError::Validation("too few latent positions for statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-4)).collect();
        Ok(Self { mean, std })
    }

    fn tensors(&self, like: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.mean.len();
        let m = Tensor::from_vec(self.mean.clone(), d, like.device())?.to_dtype(like.dtype())?;
        let s = Tensor::from_vec(self.std.clone(), d, like.device())?.to_dtype(like.dtype())?;
        Ok((m, s))
    }

    pub fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        let (m, s) = self.tensors(z)?;
        Ok(z.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        let (m, s) = self.tensors(z)?;
        Ok(z.broadcast_mul(&s)?.broadcast_add(&m)?)
    }
}

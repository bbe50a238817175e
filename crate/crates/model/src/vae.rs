//! Transformer VAE over strided motion frames.
//!
//! Frames are grouped in non-overlapping windows of `stride` steps and
//! linearly embedded, which is a strided convolution with kernel = stride.
//! The decoder inverts this with a linear map to `stride` frames per latent
//! step, i.e. a transposed convolution with the same geometry. Two learnable
//! distribution tokens are prepended in the encoder; their outputs are
//! broadcast-added to the per-step mean and log-variance.

use candle_core::{Tensor, D};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Positional, TransformerLayer};
use crate::params::{Init, Scope};
use motionflow_core::rng::Rng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Channels per frame (joints × 3).
    pub channels: usize,
    pub stride: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Total latent width; split into token and continuous parts.
    pub d_total: usize,
    /// Token-branch width; 0 disables the token branch.
    pub d_q: usize,
    /// Maximum latent length `n`.
    pub max_latent_len: usize,
    pub dropout: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            channels: 27,
            stride: 4,
            d_model: 128,
            heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            d_total: 32,
            d_q: 8,
            max_latent_len: 32,
            dropout: 0.0,
        }
    }
}

impl VaeConfig {
    pub fn d_c(&self) -> usize {
        self.d_total - self.d_q
    }

    pub fn latent_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(format!("vae.{m}")));
        if self.channels == 0 || self.stride == 0 || self.d_model == 0 {
            return bad("channels, stride and d_model must be positive");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.d_q >= self.d_total {
            return bad("d_q must be smaller than d_total");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.max_latent_len == 0 {
            return bad("layer counts and max_latent_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Posterior parameters `[B, n, d_total]`.
#[derive(Clone)]
pub struct Posterior {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl Posterior {
    /// `mu + exp(log_var / 2) * eps` with `eps` from `rng`.
    pub fn reparameterize(&self, rng: &mut Rng) -> Result<Tensor> {
        let n = self.mu.elem_count();
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::from_vec(eps, self.mu.shape(), self.mu.device())?.to_dtype(self.mu.dtype())?;
        Ok((&self.mu + (self.log_var.clone() * 0.5)?.exp()?.mul(&eps)?)?)
    }

    /// Mean over valid latent steps of the channel-summed KL to N(0, I).
    pub fn kl(&self, latent_mask: &Tensor) -> Result<Tensor> {
        let lv = &self.log_var;
        let per = ((self.mu.sqr()? + lv.exp()? - lv)? - 1.0)?.sum(D::Minus1)?;
        let per = (per * 0.5)?;
        Ok((per.mul(latent_mask)?.sum_all()? / latent_mask.sum_all()?)?)
    }
}

/// Splits `[.., d_total]` into token part `[.., d_q]` and continuous part.
pub fn split_latent(z: &Tensor, d_q: usize) -> Result<(Tensor, Tensor)> {
    let d = z.dim(D::Minus1)?;
    if d_q >= d {
        return Err(ModelError::Shape(format!("cannot split width {d} at {d_q}")));
    }
    let last = z.rank() - 1;
    Ok((z.narrow(last, 0, d_q)?, z.narrow(last, d_q, d - d_q)?))
}

pub fn merge_latent(token: &Tensor, continuous: &Tensor) -> Result<Tensor> {
    if token.dims()[..token.rank() - 1] != continuous.dims()[..continuous.rank() - 1] {
        return Err(ModelError::Shape("token and continuous parts differ in length".into()));
    }
    Ok(Tensor::cat(&[token, continuous], token.rank() - 1)?)
}

pub struct Encoder {
    embed: Linear,
    pos: Positional,
    dist_tokens: Tensor,
    layers: Vec<TransformerLayer>,
    ln: LayerNorm,
    mu_step: Linear,
    mu_seq: Linear,
    lv_step: Linear,
    lv_seq: Linear,
    cfg: VaeConfig,
}

impl Encoder {
    pub fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            embed: Linear::new(&s.sub("embed"), cfg.stride * cfg.channels, d)?,
            pos: Positional::new(&s.sub("pos"), cfg.max_latent_len, d, "latent sequence")?,
            dist_tokens: s.get("dist_tokens", &[2, d], Init::Normal(0.02))?,
            layers: (0..cfg.enc_layers)
                .map(|i| TransformerLayer::new(&s.sub(&format!("layer{i}")), d, cfg.heads, cfg.dropout))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(&s.sub("ln"), d)?,
            mu_step: Linear::new(&s.sub("mu_step"), d, cfg.d_total)?,
            mu_seq: Linear::new(&s.sub("mu_seq"), d, cfg.d_total)?,
            lv_step: Linear::new(&s.sub("lv_step"), d, cfg.d_total)?,
            lv_seq: Linear::new(&s.sub("lv_seq"), d, cfg.d_total)?,
            cfg: cfg.clone(),
        })
    }

    /// `x`: `[B, T, C]` normalized frames, `frame_mask`: `[B, T]`,
    /// `latent_mask`: `[B, n]` with `n = ceil(T / stride)`.
    pub fn forward(&self, x: &Tensor, frame_mask: &Tensor, latent_mask: &Tensor, ctx: Ctx) -> Result<Posterior> {
        let (b, t, c) = x.dims3()?;
        if c != self.cfg.channels {
            return Err(ModelError::Shape(format!("expected {} channels, got {c}", self.cfg.channels)));
        }
        let n = self.cfg.latent_len(t);
        if latent_mask.dims() != [b, n] {
            return Err(ModelError::Shape(format!("latent mask {:?} does not match [{b}, {n}]", latent_mask.dims())));
        }
        if n > self.pos.capacity() {
            return Err(ModelError::Capacity(format!("{t} frames need {n} latent steps, capacity {}", self.pos.capacity())));
        }
        let mut x = x.broadcast_mul(&frame_mask.unsqueeze(2)?)?;
        let pad = n * self.cfg.stride - t;
        if pad > 0 {
            x = Tensor::cat(&[&x, &Tensor::zeros((b, pad, c), x.dtype(), x.device())?], 1)?;
        }
        let h = self.pos.add(&self.embed.forward(&x.reshape((b, n, self.cfg.stride * c))?)?)?;
        let tokens = self.dist_tokens.unsqueeze(0)?.broadcast_as((b, 2, self.cfg.d_model))?;
        let mut h = Tensor::cat(&[&tokens, &h], 1)?;
        let ones = Tensor::ones((b, 2), latent_mask.dtype(), latent_mask.device())?;
        let mask = Tensor::cat(&[&ones, latent_mask], 1)?;
        for layer in &self.layers {
            h = layer.forward(&h, &mask, ctx)?;
        }
        let h = self.ln.forward(&h)?;
        let steps = h.narrow(1, 2, n)?;
        let g_mu = h.narrow(1, 0, 1)?;
        let g_lv = h.narrow(1, 1, 1)?;
        let mu = self.mu_step.forward(&steps)?.broadcast_add(&self.mu_seq.forward(&g_mu)?)?;
        let lv = self.lv_step.forward(&steps)?.broadcast_add(&self.lv_seq.forward(&g_lv)?)?;
        Ok(Posterior { mu, log_var: lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)? })
    }
}

pub struct Decoder {
    embed: Linear,
    pos: Positional,
    layers: Vec<TransformerLayer>,
    skips: Vec<Linear>,
    ln: LayerNorm,
    out: Linear,
    cfg: VaeConfig,
}

impl Decoder {
    pub fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let half = cfg.dec_layers / 2;
        Ok(Self {
            embed: Linear::new(&s.sub("embed"), cfg.d_total, d)?,
            pos: Positional::new(&s.sub("pos"), cfg.max_latent_len, d, "latent sequence")?,
            layers: (0..cfg.dec_layers)
                .map(|i| TransformerLayer::new(&s.sub(&format!("layer{i}")), d, cfg.heads, cfg.dropout))
                .collect::<Result<_>>()?,
            skips: (0..half).map(|i| Linear::new(&s.sub(&format!("skip{i}")), d, d)).collect::<Result<_>>()?,
            ln: LayerNorm::new(&s.sub("ln"), d)?,
            out: Linear::new(&s.sub("out"), d, cfg.stride * cfg.channels)?,
            cfg: cfg.clone(),
        })
    }

    /// `z`: `[B, n, d_total]` -> normalized frames `[B, frames, C]`.
    pub fn forward(&self, z: &Tensor, latent_mask: &Tensor, frames: usize, ctx: Ctx) -> Result<Tensor> {
        let (b, n, d) = z.dims3()?;
        if d != self.cfg.d_total {
            return Err(ModelError::Shape(format!("decoder expects width {}, got {d}", self.cfg.d_total)));
        }
        if self.cfg.latent_len(frames) != n {
            return Err(ModelError::Shape(format!("{frames} frames need {} latent steps, got {n}", self.cfg.latent_len(frames))));
        }
        let mut h = self.pos.add(&self.embed.forward(z)?)?;
        // Long skips: outputs of the first half feed the mirrored layers of
        // the second half.
        let half = self.skips.len();
        let mut stack = Vec::with_capacity(half);
        for (i, layer) in self.layers.iter().enumerate() {
            let j = self.layers.len() - 1 - i;
            if i >= self.layers.len() - half {
                let skip: Tensor = stack.pop().expect("skip pushed");
                h = (h + self.skips[j].forward(&skip)?)?;
            }
            h = layer.forward(&h, latent_mask, ctx)?;
            if i < half {
                stack.push(h.clone());
            }
        }
        let y = self.out.forward(&self.ln.forward(&h)?)?;
        Ok(y.reshape((b, n * self.cfg.stride, self.cfg.channels))?.narrow(1, 0, frames)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};
    use motionflow_core::rng::substream;

    fn small() -> VaeConfig {
        VaeConfig { d_model: 16, heads: 2, enc_layers: 2, dec_layers: 2, d_total: 8, d_q: 2, max_latent_len: 8, ..Default::default() }
    }

    #[test]
    fn shapes_and_capacity() {
        let cfg = small();
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let enc = Encoder::new(&s.scope("enc"), &cfg).unwrap();
        let dec = Decoder::new(&s.scope("dec"), &cfg).unwrap();
        let x = Tensor::zeros((2, 13, 27), DType::F32, &Device::Cpu).unwrap();
        let fm = Tensor::ones((2, 13), DType::F32, &Device::Cpu).unwrap();
        let lm = Tensor::ones((2, 4), DType::F32, &Device::Cpu).unwrap();
        let p = enc.forward(&x, &fm, &lm, Ctx::eval()).unwrap();
        assert_eq!(p.mu.dims(), [2, 4, 8]);
        let y = dec.forward(&p.mu, &lm, 13, Ctx::eval()).unwrap();
        assert_eq!(y.dims(), [2, 13, 27]);
        assert!(dec.forward(&p.mu, &lm, 17, Ctx::eval()).is_err());
        let long = Tensor::zeros((1, 40, 27), DType::F32, &Device::Cpu).unwrap();
        let r = enc.forward(
            &long,
            &Tensor::ones((1, 40), DType::F32, &Device::Cpu).unwrap(),
            &Tensor::ones((1, 10), DType::F32, &Device::Cpu).unwrap(),
            Ctx::eval(),
        );
        assert!(matches!(r, Err(ModelError::Capacity(_))));
    }

    #[test]
    fn split_merge_round_trip() {
        let z = Tensor::arange(0f32, 64.0, &Device::Cpu).unwrap().reshape((2, 1, 32)).unwrap();
        let (q, c) = split_latent(&z, 8).unwrap();
        assert_eq!((q.dim(2).unwrap(), c.dim(2).unwrap()), (8, 24));
        let back = merge_latent(&q, &c).unwrap();
        assert_eq!(back.to_vec3::<f32>().unwrap(), z.to_vec3::<f32>().unwrap());
        let (q, c) = split_latent(&Tensor::zeros((1, 256), DType::F32, &Device::Cpu).unwrap(), 64).unwrap();
        assert_eq!((q.dim(1).unwrap(), c.dim(1).unwrap()), (64, 192));
    }

    #[test]
    fn reparameterize_limits() {
        let mu = Tensor::new(&[[[0.5f64, -1.0]]], &Device::Cpu).unwrap();
        let p = Posterior { mu: mu.clone(), log_var: (mu.ones_like().unwrap() * LOG_VAR_MIN).unwrap() };
        let z = p.reparameterize(&mut substream(1, "z", &[])).unwrap();
        let d = scalar(&(z - &mu).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(d < 0.05);
    }

    #[test]
    fn padding_content_does_not_leak() {
        let cfg = small();
        let s = ParamStore::new(4, DType::F64, &Device::Cpu);
        let enc = Encoder::new(&s.scope("enc"), &cfg).unwrap();
        let mut rng = substream(9, "x", &[]);
        let vals: Vec<f64> = (0..16 * 27).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::from_vec(vals, (1, 16, 27), &Device::Cpu).unwrap();
        let fm = Tensor::from_vec((0..16).map(|i| if i < 10 { 1.0 } else { 0.0 }).collect::<Vec<f64>>(), (1, 16), &Device::Cpu).unwrap();
        let lm = Tensor::new(&[[1.0f64, 1.0, 1.0, 0.0]], &Device::Cpu).unwrap();
        let a = enc.forward(&x, &fm, &lm, Ctx::eval()).unwrap();
        let x2 = (x.clone() * 3.0).unwrap();
        let x2 = x
            .broadcast_mul(&fm.unsqueeze(2).unwrap())
            .unwrap()
            .add(&x2.broadcast_mul(&(1.0 - fm.unsqueeze(2).unwrap()).unwrap()).unwrap())
            .unwrap();
        let b = enc.forward(&x2, &fm, &lm, Ctx::eval()).unwrap();
        let d =
            scalar(&(a.mu.narrow(1, 0, 3).unwrap() - b.mu.narrow(1, 0, 3).unwrap()).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(d < 1e-12, "{d}");
    }
}

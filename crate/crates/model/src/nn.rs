//! Small differentiable building blocks on top of candle tensors.
//!
//! Normalization and softmax are composed from primitive ops so that every
//! layer has a backward pass. Masks are `0/1` tensors in the model dtype.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng as _;

use crate::error::{ModelError, Result};
use crate::params::{Init, Scope};
use motionflow_core::rng::{substream, Rng};

/// Large negative additive bias for masked attention keys.
const MASK_BIAS: f64 = 1e9;

/// Randomness for dropout. Absent during evaluation.
pub struct DropoutRng {
    rng: RefCell<Rng>,
}

impl DropoutRng {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { rng: RefCell::new(substream(seed, "dropout", &[step])) }
    }
}

/// Forward-pass context: training mode flag plus dropout randomness.
#[derive(Clone, Copy, Default)]
pub struct Ctx<'a> {
    pub dropout: Option<&'a DropoutRng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self { dropout: None }
    }

    pub fn train(rng: &'a DropoutRng) -> Self {
        Self { dropout: Some(rng) }
    }
}

/// Inverted dropout with a mask drawn from the context's seeded stream.
pub fn dropout(x: &Tensor, p: f64, ctx: Ctx) -> Result<Tensor> {
    let Some(d) = ctx.dropout else { return Ok(x.clone()) };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let n = x.elem_count();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = {
        let mut rng = d.rng.borrow_mut();
        (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
    };
    let m = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&m)?)
}

pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(in)`.
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(s, d_in, d_out, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn zeros(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(s, d_in, d_out, Init::Zeros, Init::Zeros)
    }

    pub fn no_bias(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self { w: s.get("weight", &[d_out, d_in], Init::Uniform(bound))?, b: None })
    }

    pub fn with_init(s: &Scope, d_in: usize, d_out: usize, w: Init, b: Init) -> Result<Self> {
        Ok(Self { w: s.get("weight", &[d_out, d_in], w)?, b: Some(s.get("bias", &[d_out], b)?) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| ModelError::Shape("linear input is a scalar".into()))?;
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.w.t()?)?;
        let y = match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.w.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// Normalization over the last dimension, optionally with affine parameters.
pub struct LayerNorm {
    gamma: Option<Tensor>,
    beta: Option<Tensor>,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, d: usize) -> Result<Self> {
        Ok(Self { gamma: Some(s.get("gamma", &[d], Init::Ones)?), beta: Some(s.get("beta", &[d], Init::Zeros)?), eps: 1e-5 })
    }

    /// Plain normalization, used under adaptive modulation.
    pub fn plain() -> Self {
        Self { gamma: None, beta: None, eps: 1e-6 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let mut y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        if let Some(g) = &self.gamma {
            y = y.broadcast_mul(g)?;
        }
        if let Some(b) = &self.beta {
            y = y.broadcast_add(b)?;
        }
        Ok(y)
    }
}

/// Root-mean-square normalization over the last dimension.
pub struct RmsNorm {
    gamma: Tensor,
    eps: f64,
}

impl RmsNorm {
    pub fn new(s: &Scope, d: usize) -> Result<Self> {
        Ok(Self { gamma: s.get("gamma", &[d], Init::Ones)?, eps: 1e-6 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(x.broadcast_div(&(ms + self.eps)?.sqrt()?)?.broadcast_mul(&self.gamma)?)
    }
}

/// `(1 + scale) * x + shift` with per-sample `[B, d]` modulation.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let scale = (scale.unsqueeze(1)? + 1.0)?;
    Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift.unsqueeze(1)?)?)
}

/// Additive key bias `[B, 1, 1, Tk]`: 0 for valid keys, `-1e9` for padding.
pub fn key_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, tk) = mask.dims2()?;
    Ok(((mask - 1.0)? * MASK_BIAS)?.reshape((b, 1, 1, tk))?)
}

/// Masked mean over time: `Σ m_t x_t / (Σ m_t + 1e-8)`, `[B,T,d] -> [B,d]`.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(2)?;
    let num = x.broadcast_mul(&m)?.sum(1)?;
    let den = (m.sum(1)? + 1e-8)?;
    Ok(num.broadcast_div(&den)?)
}

pub fn mask_tensor(mask: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Tensor> {
    let b = mask.len();
    let t = mask.first().map_or(0, Vec::len);
    if mask.iter().any(|m| m.len() != t) {
        return Err(ModelError::Shape("ragged mask rows".into()));
    }
    let v: Vec<f32> = mask.iter().flatten().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (b, t), device)?.to_dtype(dtype)?)
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &Scope, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&s.sub("fc1"), d, hidden)?, fc2: Linear::new(&s.sub("fc2"), hidden, d)? })
    }

    pub fn forward(&self, x: &Tensor, p: f64, ctx: Ctx) -> Result<Tensor> {
        let h = dropout(&self.fc1.forward(x)?.gelu()?, p, ctx)?;
        self.fc2.forward(&h)
    }
}

/// Projected keys and values, `[B, H, Tk, dh]` each.
#[derive(Clone)]
pub struct KeyValue {
    pub k: Tensor,
    pub v: Tensor,
}

impl KeyValue {
    pub fn cat(parts: &[&KeyValue]) -> Result<KeyValue> {
        let ks: Vec<&Tensor> = parts.iter().map(|p| &p.k).collect();
        let vs: Vec<&Tensor> = parts.iter().map(|p| &p.v).collect();
        Ok(KeyValue { k: Tensor::cat(&ks, 2)?, v: Tensor::cat(&vs, 2)? })
    }
}

/// Multi-head attention, optionally with RMS-normalized queries and keys.
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    q_norm: Option<RmsNorm>,
    k_norm: Option<RmsNorm>,
    heads: usize,
    d: usize,
}

impl Attention {
    pub fn new(s: &Scope, d: usize, heads: usize, qk_norm: bool) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(ModelError::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let (q_norm, k_norm) =
            if qk_norm { (Some(RmsNorm::new(&s.sub("q_norm"), dh)?), Some(RmsNorm::new(&s.sub("k_norm"), dh)?)) } else { (None, None) };
        Ok(Self {
            q: Linear::new(&s.sub("q"), d, d)?,
            k: Linear::new(&s.sub("k"), d, d)?,
            v: Linear::new(&s.sub("v"), d, d)?,
            o: Linear::new(&s.sub("o"), d, d)?,
            q_norm,
            k_norm,
            heads,
            d,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, self.d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Query projection before any normalization, `[B, H, Tq, dh]`.
    pub fn raw_query(&self, x: &Tensor) -> Result<Tensor> {
        self.split_heads(&self.q.forward(x)?)
    }

    /// Key projection before any normalization, `[B, H, Tk, dh]`.
    pub fn raw_key(&self, src: &Tensor) -> Result<Tensor> {
        self.split_heads(&self.k.forward(src)?)
    }

    pub fn project_kv(&self, src: &Tensor) -> Result<KeyValue> {
        let mut k = self.raw_key(src)?;
        if let Some(n) = &self.k_norm {
            k = n.forward(&k)?;
        }
        Ok(KeyValue { k, v: self.split_heads(&self.v.forward(src)?)? })
    }

    /// Pre-softmax attention logits from raw query/key projections.
    pub fn logits(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let q = match &self.q_norm {
            Some(n) => n.forward(q)?,
            None => q.clone(),
        };
        let k = match &self.k_norm {
            Some(n) => n.forward(k)?,
            None => k.clone(),
        };
        self.scores(&q, &k)
    }

    fn scores(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let scale = 1.0 / ((self.d / self.heads) as f64).sqrt();
        Ok((q.matmul(&k.t()?.contiguous()?)? * scale)?)
    }

    /// Attends from `x` `[B, Tq, d]` to precomputed keys/values with key mask
    /// `[B, Tk]`.
    pub fn attend(&self, x: &Tensor, kv: &KeyValue, key_mask: &Tensor, p: f64, ctx: Ctx) -> Result<Tensor> {
        let (b, tq, _) = x.dims3()?;
        let mut q = self.raw_query(x)?;
        if let Some(n) = &self.q_norm {
            q = n.forward(&q)?;
        }
        let att = self.scores(&q, &kv.k)?.broadcast_add(&key_bias(key_mask)?)?;
        let att = dropout(&candle_nn::ops::softmax(&att, D::Minus1)?, p, ctx)?;
        let y = att.matmul(&kv.v)?.transpose(1, 2)?.reshape((b, tq, self.d))?;
        self.o.forward(&y)
    }

    pub fn forward(&self, x: &Tensor, src: &Tensor, key_mask: &Tensor, p: f64, ctx: Ctx) -> Result<Tensor> {
        let kv = self.project_kv(src)?;
        self.attend(x, &kv, key_mask, p, ctx)
    }
}

/// Pre-norm transformer layer: self-attention then feed-forward.
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
    p: f64,
}

impl TransformerLayer {
    pub fn new(s: &Scope, d: usize, heads: usize, p: f64) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&s.sub("ln1"), d)?,
            attn: Attention::new(&s.sub("attn"), d, heads, false)?,
            ln2: LayerNorm::new(&s.sub("ln2"), d)?,
            mlp: Mlp::new(&s.sub("mlp"), d, 4 * d)?,
            p,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + dropout(&self.attn.forward(&h, &h, mask, self.p, ctx)?, self.p, ctx)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + dropout(&self.mlp.forward(&h, self.p, ctx)?, self.p, ctx)?)?)
    }
}

/// Learned positional table with an explicit capacity.
pub struct Positional {
    table: Tensor,
    what: &'static str,
}

impl Positional {
    pub fn new(s: &Scope, max_len: usize, d: usize, what: &'static str) -> Result<Self> {
        Ok(Self { table: s.get("table", &[max_len, d], Init::Normal(0.02))?, what })
    }

    pub fn capacity(&self) -> usize {
        self.table.dim(0).unwrap_or(0)
    }

    pub fn add(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(1)?;
        if n > self.capacity() {
            return Err(ModelError::Capacity(format!("{} length {n} exceeds capacity {}", self.what, self.capacity())));
        }
        Ok(x.broadcast_add(&self.table.narrow(0, 0, n)?)?)
    }
}

/// Converts a scalar loss tensor to `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn store() -> ParamStore {
        ParamStore::new(1, DType::F64, &Device::Cpu)
    }

    #[test]
    fn masked_mean_cases() {
        let x = Tensor::new(&[[[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]]], &Device::Cpu).unwrap();
        let all = Tensor::new(&[[1.0f64, 1.0, 1.0]], &Device::Cpu).unwrap();
        let got = masked_mean(&x, &all).unwrap().to_vec2::<f64>().unwrap();
        assert!((got[0][0] - 3.0).abs() < 1e-7 && (got[0][1] - 4.0).abs() < 1e-7);
        let one = Tensor::new(&[[0.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let got = masked_mean(&x, &one).unwrap().to_vec2::<f64>().unwrap();
        assert!((got[0][0] - 3.0).abs() < 1e-7 && (got[0][1] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn padded_keys_do_not_affect_valid_queries() {
        let s = store();
        let attn = Attention::new(&s.scope("a"), 8, 2, false).unwrap();
        let mut rng = substream(2, "t", &[]);
        let vals: Vec<f64> = (0..5 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vals, (1, 5, 8), &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let a = attn.forward(&x, &x, &mask, 0.0, Ctx::eval()).unwrap();
        let x2 = Tensor::cat(&[&x.narrow(1, 0, 3).unwrap(), &(x.narrow(1, 3, 2).unwrap() * 7.0).unwrap()], 1).unwrap();
        let b = attn.forward(&x2, &x2, &mask, 0.0, Ctx::eval()).unwrap();
        let d = (a.narrow(1, 0, 3).unwrap() - b.narrow(1, 0, 3).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&d).unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes() {
        let s = store();
        let ln = LayerNorm::new(&s.scope("ln"), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dropout_is_seeded_and_off_in_eval() {
        let x = Tensor::ones((4, 16), DType::F32, &Device::Cpu).unwrap();
        let a = DropoutRng::new(5, 0);
        let b = DropoutRng::new(5, 0);
        let ya = dropout(&x, 0.5, Ctx::train(&a)).unwrap().to_vec2::<f32>().unwrap();
        let yb = dropout(&x, 0.5, Ctx::train(&b)).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(ya, yb);
        assert!(ya.iter().flatten().any(|&v| v == 0.0));
        let ye = dropout(&x, 0.5, Ctx::eval()).unwrap().to_vec2::<f32>().unwrap();
        assert!(ye.iter().flatten().all(|&v| v == 1.0));
    }
}

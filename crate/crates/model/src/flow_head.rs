//! Conditional velocity network `v(z_t, t, caption)`.
//!
//! A caption encoder produces token-level memory and a pooled summary; the
//! summary is gated and added to a sinusoidal time embedding to form the
//! combined condition. Two block variants consume it:
//!
//! * `nova`: self-attention, then cross-attention over the combined token
//!   prepended to the text memory with the query LayerNorm modulated by the
//!   combined condition, then feed-forward;
//! * `orbit`: self-attention and feed-forward under adaptive LayerNorm driven
//!   by the combined condition, with QK-normalized cross-attention over the
//!   text memory in between.
//!
//! Every residual branch is scaled by a learnable per-channel gate. Text
//! keys/values do not depend on `z_t` or `t`, so they can be computed once per
//! caption ([`TextCache`]) and reused for every solver step.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::batch::TextBatch;
use crate::error::{ModelError, Result};
use crate::nn::{dropout, masked_mean, modulate, Attention, Ctx, KeyValue, LayerNorm, Linear, Mlp, Positional, TransformerLayer};
use crate::params::{Init, Scope};

pub const MAX_PERIOD: f64 = 10_000.0;
/// Continuous time is scaled before the sinusoid so that `t ∈ [0, 1]` spans
/// many periods of the fastest frequency.
pub const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    Nova,
    Orbit,
}

impl std::str::FromStr for BlockVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nova" => Ok(Self::Nova),
            "orbit" => Ok(Self::Orbit),
            _ => Err(ModelError::Config(format!("unknown block variant {s:?} (expected nova or orbit)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowHeadConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub variant: BlockVariant,
    pub max_latent_len: usize,
    pub max_text_len: usize,
    pub text_layers: usize,
    pub gate_init: f64,
}

impl Default for FlowHeadConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_blocks: 6,
            n_heads: 4,
            dropout: 0.1,
            variant: BlockVariant::Orbit,
            max_latent_len: 32,
            max_text_len: 24,
            text_layers: 2,
            gate_init: 0.02,
        }
    }
}

impl FlowHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(ModelError::Config("flow.d_model must be positive and even".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config("flow.d_model must be divisible by flow.n_heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("flow.dropout must be in [0, 1)".into()));
        }
        if self.max_latent_len == 0 || self.max_text_len == 0 {
            return Err(ModelError::Config("flow.max_latent_len and flow.max_text_len must be positive".into()));
        }
        Ok(())
    }
}

/// Geometric frequency ladder from 1 down to `1 / MAX_PERIOD`.
pub fn frequencies(d: usize) -> Vec<f64> {
    let half = d / 2;
    if half == 1 {
        return vec![1.0];
    }
    (0..half).map(|i| (-(MAX_PERIOD.ln()) * i as f64 / (half - 1) as f64).exp()).collect()
}

/// Raw sinusoid features `[cos(f t'), sin(f t')]` with `t' = TIME_SCALE · t`.
pub fn sinusoid_features(t: f64, d: usize) -> Vec<f64> {
    let f = frequencies(d);
    let ts = t * TIME_SCALE;
    f.iter().map(|w| (w * ts).cos()).chain(f.iter().map(|w| (w * ts).sin())).collect()
}

pub struct TimeEmbedding {
    fc1: Linear,
    fc2: Linear,
    d: usize,
}

impl TimeEmbedding {
    pub fn new(s: &Scope, d: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&s.sub("fc1"), d, 4 * d)?, fc2: Linear::new(&s.sub("fc2"), 4 * d, d)?, d })
    }

    /// `t`: per-sample times in `[0, 1]` -> `[B, d]`.
    pub fn forward(&self, t: &[f64], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(ModelError::Validation(format!("time {bad} is outside [0, 1]")));
        }
        let raw: Vec<f64> = t.iter().flat_map(|&t| sinusoid_features(t, self.d)).collect();
        let raw = Tensor::from_vec(raw, (t.len(), self.d), device)?.to_dtype(dtype)?;
        self.fc2.forward(&self.fc1.forward(&raw)?.silu()?)
    }
}

/// Encoded caption, independent of `z_t` and `t`.
#[derive(Clone)]
pub struct TextCondition {
    /// `[B, L, d]`, zero at padding.
    pub memory: Tensor,
    /// `[B, L]`.
    pub mask: Tensor,
    /// `[B, d]` masked mean of the memory.
    pub summary: Tensor,
    /// `[B]`: 1 when the caption has at least one token.
    pub has_text: Tensor,
}

impl TextCondition {
    pub fn batch_size(&self) -> usize {
        self.mask.dim(0).unwrap_or(0)
    }

    /// Concatenates two conditions along the batch (used for CFG).
    pub fn cat(a: &TextCondition, b: &TextCondition) -> Result<TextCondition> {
        let la = a.mask.dim(1)?;
        let lb = b.mask.dim(1)?;
        let pad = |c: &TextCondition, to: usize| -> Result<(Tensor, Tensor)> {
            let l = c.mask.dim(1)?;
            if l == to {
                return Ok((c.memory.clone(), c.mask.clone()));
            }
            let (bsz, _, d) = c.memory.dims3()?;
            let zm = Tensor::zeros((bsz, to - l, d), c.memory.dtype(), c.memory.device())?;
            let zk = Tensor::zeros((bsz, to - l), c.mask.dtype(), c.mask.device())?;
            Ok((Tensor::cat(&[&c.memory, &zm], 1)?, Tensor::cat(&[&c.mask, &zk], 1)?))
        };
        let l = la.max(lb);
        let (ma, ka) = pad(a, l)?;
        let (mb, kb) = pad(b, l)?;
        Ok(TextCondition {
            memory: Tensor::cat(&[&ma, &mb], 0)?,
            mask: Tensor::cat(&[&ka, &kb], 0)?,
            summary: Tensor::cat(&[&a.summary, &b.summary], 0)?,
            has_text: Tensor::cat(&[&a.has_text, &b.has_text], 0)?,
        })
    }

    /// The unconditional condition with the same shapes: no valid tokens.
    pub fn null_like(&self) -> Result<TextCondition> {
        Ok(TextCondition {
            memory: self.memory.zeros_like()?,
            mask: self.mask.zeros_like()?,
            summary: self.summary.zeros_like()?,
            has_text: self.has_text.zeros_like()?,
        })
    }
}

pub struct CaptionEncoder {
    embed: Tensor,
    pos: Positional,
    layers: Vec<TransformerLayer>,
    ln: LayerNorm,
    proj: Linear,
    proj_ln: LayerNorm,
    vocab_size: usize,
}

impl CaptionEncoder {
    pub fn new(s: &Scope, cfg: &FlowHeadConfig, vocab_size: usize) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            embed: s.get("embed", &[vocab_size, d], Init::Normal(0.02))?,
            pos: Positional::new(&s.sub("pos"), cfg.max_text_len, d, "caption")?,
            layers: (0..cfg.text_layers)
                .map(|i| TransformerLayer::new(&s.sub(&format!("layer{i}")), d, cfg.n_heads, cfg.dropout))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(&s.sub("ln"), d)?,
            proj: Linear::new(&s.sub("proj"), d, d)?,
            proj_ln: LayerNorm::new(&s.sub("proj_ln"), d)?,
            vocab_size,
        })
    }

    pub fn forward(&self, text: &TextBatch, ctx: Ctx) -> Result<TextCondition> {
        let ids = text.ids.flatten_all()?.to_vec1::<u32>()?;
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(ModelError::Core(motionflow_core::CoreError::Vocab(format!("token id {bad} is outside the vocabulary"))));
        }
        let (b, l) = text.ids.dims2()?;
        let mut h = self.embed.index_select(&text.ids.flatten_all()?, 0)?.reshape((b, l, self.embed.dim(1)?))?;
        h = self.pos.add(&h)?;
        for layer in &self.layers {
            h = layer.forward(&h, &text.mask, ctx)?;
        }
        let h = self.proj_ln.forward(&self.proj.forward(&self.ln.forward(&h)?)?)?;
        let memory = h.broadcast_mul(&text.mask.unsqueeze(2)?)?;
        let summary = masked_mean(&memory, &text.mask)?;
        let has_text = text.mask.max(1)?;
        Ok(TextCondition { memory, mask: text.mask.clone(), summary, has_text })
    }
}

struct Gates {
    sa: Tensor,
    ca: Tensor,
    ff: Tensor,
}

impl Gates {
    fn new(s: &Scope, d: usize) -> Result<Self> {
        Ok(Self {
            sa: s.get("gate_sa", &[d], Init::Ones)?,
            ca: s.get("gate_ca", &[d], Init::Ones)?,
            ff: s.get("gate_ff", &[d], Init::Ones)?,
        })
    }
}

enum Block {
    Nova { ln_sa: LayerNorm, sa: Attention, ln_ca: LayerNorm, cond_mod: Linear, ca: Attention, ln_ff: LayerNorm, ff: Mlp, gates: Gates },
    Orbit { ada: Linear, sa: Attention, ln_ca: LayerNorm, ca: Attention, ff: Mlp, gates: Gates },
}

impl Block {
    fn new(s: &Scope, cfg: &FlowHeadConfig) -> Result<Self> {
        let d = cfg.d_model;
        let h = cfg.n_heads;
        Ok(match cfg.variant {
            BlockVariant::Nova => Block::Nova {
                ln_sa: LayerNorm::new(&s.sub("ln_sa"), d)?,
                sa: Attention::new(&s.sub("sa"), d, h, false)?,
                ln_ca: LayerNorm::plain(),
                cond_mod: Linear::zeros(&s.sub("cond_mod"), d, 2 * d)?,
                ca: Attention::new(&s.sub("ca"), d, h, false)?,
                ln_ff: LayerNorm::new(&s.sub("ln_ff"), d)?,
                ff: Mlp::new(&s.sub("ff"), d, 4 * d)?,
                gates: Gates::new(s, d)?,
            },
            BlockVariant::Orbit => Block::Orbit {
                ada: Linear::zeros(&s.sub("ada"), d, 4 * d)?,
                sa: Attention::new(&s.sub("sa"), d, h, false)?,
                ln_ca: LayerNorm::new(&s.sub("ln_ca"), d)?,
                ca: Attention::new(&s.sub("ca"), d, h, true)?,
                ff: Mlp::new(&s.sub("ff"), d, 4 * d)?,
                gates: Gates::new(s, d)?,
            },
        })
    }

    fn cross(&self) -> &Attention {
        match self {
            Block::Nova { ca, .. } | Block::Orbit { ca, .. } => ca,
        }
    }

    fn forward(&self, x: &Tensor, c: &Tensor, text: &TextCondition, text_kv: &KeyValue, mask: &Tensor, p: f64, ctx: Ctx) -> Result<Tensor> {
        let gated = |g: &Tensor, y: Tensor| -> Result<Tensor> { Ok(dropout(&y, p, ctx)?.broadcast_mul(g)?) };
        match self {
            Block::Nova { ln_sa, sa, ln_ca, cond_mod, ca, ln_ff, ff, gates } => {
                let h = ln_sa.forward(x)?;
                let x = (x + gated(&gates.sa, sa.forward(&h, &h, mask, p, ctx)?)?)?;
                let m = cond_mod.forward(&c.silu()?)?;
                let (shift, scale) = (m.narrow(1, 0, x.dim(2)?)?, m.narrow(1, x.dim(2)?, x.dim(2)?)?);
                let q = modulate(&ln_ca.forward(&x)?, &shift, &scale)?;
                let ckv = ca.project_kv(&c.unsqueeze(1)?)?;
                let kv = KeyValue::cat(&[&ckv, text_kv])?;
                let ones = Tensor::ones((x.dim(0)?, 1), text.mask.dtype(), text.mask.device())?;
                let kmask = Tensor::cat(&[&ones, &text.mask], 1)?;
                let x = (&x + gated(&gates.ca, ca.attend(&q, &kv, &kmask, p, ctx)?)?)?;
                let h = ln_ff.forward(&x)?;
                Ok((&x + gated(&gates.ff, ff.forward(&h, p, ctx)?)?)?)
            }
            Block::Orbit { ada, sa, ln_ca, ca, ff, gates } => {
                let d = x.dim(2)?;
                let m = ada.forward(&c.silu()?)?;
                let part = |i: usize| m.narrow(1, i * d, d);
                let norm = LayerNorm::plain();
                let h = modulate(&norm.forward(x)?, &part(0)?, &part(1)?)?;
                let x = (x + gated(&gates.sa, sa.forward(&h, &h, mask, p, ctx)?)?)?;
                let y = ca.attend(&ln_ca.forward(&x)?, text_kv, &text.mask, p, ctx)?;
                // Rows without any caption token attend to nothing.
                let y = y.broadcast_mul(&text.has_text.reshape((x.dim(0)?, 1, 1))?)?;
                let x = (&x + gated(&gates.ca, y)?)?;
                let h = modulate(&norm.forward(&x)?, &part(2)?, &part(3)?)?;
                Ok((&x + gated(&gates.ff, ff.forward(&h, p, ctx)?)?)?)
            }
        }
    }
}

/// Per-caption cross-attention keys/values for every block.
pub struct TextCache {
    kv: Vec<KeyValue>,
}

pub struct FlowHead {
    pub config: FlowHeadConfig,
    time: TimeEmbedding,
    text_gate: Tensor,
    text_proj: Linear,
    caption: CaptionEncoder,
    embed: Linear,
    pos: Positional,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out: Linear,
    d_latent: usize,
}

impl FlowHead {
    pub fn new(s: &Scope, cfg: &FlowHeadConfig, d_latent: usize, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            config: cfg.clone(),
            time: TimeEmbedding::new(&s.sub("time"), d)?,
            text_gate: s.get("text_gate", &[1], Init::Const(cfg.gate_init))?,
            text_proj: Linear::new(&s.sub("text_proj"), d, d)?,
            caption: CaptionEncoder::new(&s.sub("caption"), cfg, vocab_size)?,
            embed: Linear::new(&s.sub("embed"), d_latent, d)?,
            pos: Positional::new(&s.sub("pos"), cfg.max_latent_len, d, "latent sequence")?,
            blocks: (0..cfg.n_blocks).map(|i| Block::new(&s.sub(&format!("block{i}")), cfg)).collect::<Result<_>>()?,
            ln_out: LayerNorm::new(&s.sub("ln_out"), d)?,
            out: Linear::new(&s.sub("out"), d, d_latent)?,
            d_latent,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn encode_caption(&self, text: &TextBatch, ctx: Ctx) -> Result<TextCondition> {
        self.caption.forward(text, ctx)
    }

    pub fn time_embedding(&self, t: &[f64], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        self.time.forward(t, dtype, device)
    }

    /// `time_embedding(t) + gate · project(summary) · has_text`, `[B, d]`.
    pub fn combined(&self, text: &TextCondition, t: &[f64]) -> Result<Tensor> {
        let temb = self.time.forward(t, text.summary.dtype(), text.summary.device())?;
        let txt = self.text_proj.forward(&text.summary)?.broadcast_mul(&self.text_gate)?;
        let txt = txt.broadcast_mul(&text.has_text.unsqueeze(1)?)?;
        Ok((temb + txt)?)
    }

    /// Text projection `project(summary)` without gate (for inspection).
    pub fn projected_summary(&self, text: &TextCondition) -> Result<Tensor> {
        self.text_proj.forward(&text.summary)
    }

    pub fn cache_text(&self, text: &TextCondition) -> Result<TextCache> {
        Ok(TextCache { kv: self.blocks.iter().map(|b| b.cross().project_kv(&text.memory)).collect::<Result<_>>()? })
    }

    /// Latent embedding with positions, `[B, n, d]`.
    pub fn embed(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.dim(1)?;
        if n > self.pos.capacity() {
            return Err(ModelError::Capacity(format!("latent length {n} exceeds capacity {}", self.pos.capacity())));
        }
        if z.dim(D::Minus1)? != self.d_latent {
            return Err(ModelError::Shape(format!("flow input width {} != {}", z.dim(D::Minus1)?, self.d_latent)));
        }
        self.pos.add(&self.embed.forward(z)?)
    }

    pub fn project_out(&self, h: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.ln_out.forward(h)?)
    }

    /// One block applied to hidden states `h`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_block(
        &self,
        i: usize,
        h: &Tensor,
        combined: &Tensor,
        text: &TextCondition,
        latent_mask: &Tensor,
        cache: Option<&TextCache>,
        ctx: Ctx,
    ) -> Result<Tensor> {
        let b = &self.blocks[i];
        let kv = match cache {
            Some(c) => c.kv[i].clone(),
            None => b.cross().project_kv(&text.memory)?,
        };
        b.forward(h, combined, text, &kv, latent_mask, self.config.dropout, ctx)
    }

    /// Velocity prediction `[B, n, d_latent]`.
    pub fn forward(
        &self,
        z_t: &Tensor,
        t: &[f64],
        text: &TextCondition,
        latent_mask: &Tensor,
        cache: Option<&TextCache>,
        ctx: Ctx,
    ) -> Result<Tensor> {
        if t.len() != z_t.dim(0)? || text.batch_size() != t.len() {
            return Err(ModelError::Shape(format!("batch sizes differ: z {}, t {}, text {}", z_t.dim(0)?, t.len(), text.batch_size())));
        }
        let c = self.combined(text, t)?;
        let mut h = self.embed(z_t)?;
        for i in 0..self.blocks.len() {
            h = self.forward_block(i, &h, &c, text, latent_mask, cache, ctx)?;
        }
        self.project_out(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero() {
        let f = sinusoid_features(0.0, 16);
        assert!(f[..8].iter().all(|&c| c == 1.0));
        assert!(f[8..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn frequency_ladder_spans_max_period() {
        let f = frequencies(128);
        assert!((f[0] / f[f.len() - 1] - MAX_PERIOD).abs() < 1e-6);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("nova".parse::<BlockVariant>().unwrap(), BlockVariant::Nova);
        assert!("comet".parse::<BlockVariant>().is_err());
    }
}

//! Multi-scale residual quantization with one shared codebook.
//!
//! For a latent of length `n` the residual is average-pooled to each
//! resolution of the schedule (coarse to fine), quantized by nearest
//! neighbour, linearly upsampled back to `n` and subtracted. The dequantized
//! latent is the sum of the upsampled scales. Index selection and the
//! dequantized sum are computed in `f64` on the host, so [`Quantizer::dequantize`]
//! reproduces the quantizer's output bit for bit. Only the commitment loss is
//! built from tensors, since it is the only part that carries gradients.

use candle_core::{Tensor, D};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use motionflow_core::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqConfig {
    pub codebook_size: usize,
    /// Resolution divisors of `n`, coarse to fine; the last must be 1.
    pub divisors: Vec<usize>,
    pub ema_decay: f64,
    /// Laplace smoothing constant for cluster sizes.
    pub smoothing: f64,
    /// Keep entry 0 fixed at the origin.
    pub pin_zero: bool,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self { codebook_size: 128, divisors: vec![8, 4, 2, 1], ema_decay: 0.99, smoothing: 1e-5, pin_zero: false }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(ModelError::Config("rvq.codebook_size must be >= 2".into()));
        }
        if self.divisors.is_empty() || self.divisors.contains(&0) || self.divisors.windows(2).any(|w| w[0] <= w[1]) {
            return Err(ModelError::Config("rvq.divisors must be positive and strictly decreasing".into()));
        }
        if *self.divisors.last().unwrap() != 1 {
            return Err(ModelError::Config("rvq.divisors must end with 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(ModelError::Config("rvq.ema_decay must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Resolutions `ceil(n / divisor)` per level; `None` where a level repeats
/// the previous resolution.
pub fn level_resolutions(n: usize, divisors: &[usize]) -> Vec<Option<usize>> {
    let mut prev = 0;
    divisors
        .iter()
        .map(|&d| {
            let h = n.div_ceil(d).max(1);
            if h == prev {
                None
            } else {
                prev = h;
                Some(h)
            }
        })
        .collect()
}

/// Strictly ascending resolution schedule ending at `n`.
pub fn schedule(n: usize, divisors: &[usize]) -> Vec<usize> {
    level_resolutions(n, divisors).into_iter().flatten().collect()
}

/// Row-major `h_src × d` sequence.
fn rows(x: &[f64], d: usize) -> impl Iterator<Item = &[f64]> {
    x.chunks(d)
}

/// Average pooling of `n × d` to `h × d`; bin `i` covers
/// `[floor(i n / h), floor((i + 1) n / h))`.
pub fn pool(x: &[f64], d: usize, h: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut out = vec![0.0; h * d];
    for i in 0..h {
        let (a, b) = (i * n / h, (i + 1) * n / h);
        let cnt = (b - a) as f64;
        for t in a..b {
            for c in 0..d {
                out[i * d + c] += x[t * d + c];
            }
        }
        for c in 0..d {
            out[i * d + c] /= cnt;
        }
    }
    out
}

/// Source coordinate and weight for destination step `i` under endpoint
/// alignment.
fn lerp_coords(i: usize, h_src: usize, h_dst: usize) -> (usize, usize, f64) {
    if h_src == 1 || h_dst == 1 {
        return (0, 0, 0.0);
    }
    let num = i * (h_src - 1);
    let den = h_dst - 1;
    let a = num / den;
    let rem = num % den;
    if rem == 0 {
        (a, a, 0.0)
    } else {
        (a, a + 1, rem as f64 / den as f64)
    }
}

/// Linear interpolation along time with aligned endpoints.
pub fn resample_temporal(x: &[f64], d: usize, h_dst: usize) -> Vec<f64> {
    let h_src = x.len() / d;
    if h_src == h_dst {
        return x.to_vec();
    }
    let mut out = Vec::with_capacity(h_dst * d);
    for i in 0..h_dst {
        let (a, b, w) = lerp_coords(i, h_src, h_dst);
        for c in 0..d {
            let (xa, xb) = (x[a * d + c], x[b * d + c]);
            out.push(if w == 0.0 { xa } else { xa + w * (xb - xa) });
        }
    }
    out
}

/// Dense `h × n` pooling weights (row `i` averages bin `i`).
fn pool_matrix(n: usize, h: usize, n_pad: usize, h_pad: usize) -> Vec<f64> {
    let mut m = vec![0.0; h_pad * n_pad];
    for i in 0..h {
        let (a, b) = (i * n / h, (i + 1) * n / h);
        for t in a..b {
            m[i * n_pad + t] = 1.0 / (b - a) as f64;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    /// Row-major `size × dim`.
    pub entries: Vec<f64>,
    pub usage_count: Vec<u64>,
    pub ema_cluster_size: Vec<f64>,
    pub ema_embed_sum: Vec<f64>,
    pub initialized: bool,
}

impl Codebook {
    pub fn new(size: usize, dim: usize) -> Self {
        Self {
            size,
            dim,
            entries: vec![0.0; size * dim],
            usage_count: vec![0; size],
            ema_cluster_size: vec![0.0; size],
            ema_embed_sum: vec![0.0; size * dim],
            initialized: false,
        }
    }

    pub fn from_entries(entries: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || entries.is_empty() || !entries.len().is_multiple_of(dim) {
            return Err(ModelError::Config("codebook entries must be a non-empty multiple of dim".into()));
        }
        let size = entries.len() / dim;
        let mut cb = Self::new(size, dim);
        cb.ema_cluster_size = vec![1.0; size];
        cb.ema_embed_sum = entries.clone();
        cb.entries = entries;
        cb.initialized = true;
        Ok(cb)
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Nearest entry by squared distance; lowest index wins ties.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.size {
            let d: f64 = self.entry(k).iter().zip(x).map(|(e, v)| (e - v) * (e - v)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    pub fn dead_entries(&self) -> usize {
        self.usage_count.iter().filter(|&&u| u == 0).count()
    }
}

/// Quantization of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceQuantization {
    pub resolutions: Vec<usize>,
    /// Per level: `None` for a repeated resolution.
    pub level_res: Vec<Option<usize>>,
    pub indices: Vec<Vec<u32>>,
    /// Per scale pre-quantization features `h × d` (pooled residual).
    pub features: Vec<Vec<f64>>,
    /// Per scale selected entries `h × d`.
    pub per_scale_quantized: Vec<Vec<f64>>,
    /// `n × d` dequantized sum.
    pub z_q_hat: Vec<f64>,
    /// `n × d` residual left after the last scale.
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub config: RvqConfig,
    pub codebook: Codebook,
}

/// Output of a batched quantization.
pub struct QuantOutput {
    /// Straight-through dequantized latent `[B, n_pad, d]`: its value is the
    /// dequantized sum and its gradient passes to the input unchanged.
    pub z_q_hat: Tensor,
    /// Dequantized latent without gradient.
    pub z_q_hat_value: Tensor,
    pub sequences: Vec<SequenceQuantization>,
    /// Commitment loss per schedule level.
    pub commit_per_scale: Vec<Tensor>,
}

impl QuantOutput {
    pub fn commit_total(&self) -> Result<Tensor> {
        let mut it = self.commit_per_scale.iter();
        let first = it.next().ok_or_else(|| ModelError::Config("empty schedule".into()))?.clone();
        it.try_fold(first, |acc, t| Ok((acc + t)?))
    }

    /// (entry, feature) pairs for the codebook update.
    pub fn assignments(&self) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        for s in &self.sequences {
            for (idx, feat) in s.indices.iter().zip(&s.features) {
                for (i, f) in idx.iter().zip(rows(feat, feat.len() / idx.len())) {
                    out.push((*i as usize, f.to_vec()));
                }
            }
        }
        out
    }
}

/// Mean over valid locations of the squared distance between features and
/// their (constant) selected entries. `features`, `entries`: `[B, H, d]`,
/// `mask`: `[B, H]`. An all-invalid mask yields 0 with a warning.
pub fn commitment_loss(features: &Tensor, entries: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let count = mask.sum_all()?;
    if crate::nn::scalar(&count)? == 0.0 {
        log::warn!("commitment loss: no valid locations at this scale");
        return Ok(count.zeros_like()?);
    }
    let per = (features - entries.detach())?.sqr()?.sum(D::Minus1)?;
    Ok((per.mul(mask)?.sum_all()? / count)?)
}

impl Quantizer {
    pub fn new(config: RvqConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let mut codebook = Codebook::new(config.codebook_size, dim);
        if config.pin_zero {
            codebook.ema_cluster_size[0] = 1.0;
        }
        Ok(Self { config, codebook })
    }

    fn first_free(&self) -> usize {
        usize::from(self.config.pin_zero)
    }

    /// Initializes entries from random feature rows (with replacement).
    pub fn init_from(&mut self, features: &[Vec<f64>], rng: &mut Rng) -> Result<()> {
        if features.is_empty() {
            return Err(ModelError::Validation("no features to initialize the codebook".into()));
        }
        let d = self.codebook.dim;
        for k in self.first_free()..self.codebook.size {
            let f = features.choose(rng).expect("non-empty");
            self.codebook.entries[k * d..(k + 1) * d].copy_from_slice(f);
            self.codebook.ema_embed_sum[k * d..(k + 1) * d].copy_from_slice(f);
            self.codebook.ema_cluster_size[k] = 1.0;
        }
        self.codebook.initialized = true;
        Ok(())
    }

    /// Residual quantization of one `n × d` sequence.
    pub fn quantize_sequence(&self, z: &[f64]) -> Result<SequenceQuantization> {
        let d = self.codebook.dim;
        if self.codebook.size == 0 {
            return Err(ModelError::Config("empty codebook".into()));
        }
        if z.is_empty() || !z.len().is_multiple_of(d) {
            return Err(ModelError::Shape(format!("sequence length {} is not a multiple of {d}", z.len())));
        }
        let n = z.len() / d;
        let level_res = level_resolutions(n, &self.config.divisors);
        let mut residual = z.to_vec();
        let mut z_hat = vec![0.0; n * d];
        let mut out = SequenceQuantization {
            resolutions: Vec::new(),
            level_res: level_res.clone(),
            indices: Vec::new(),
            features: Vec::new(),
            per_scale_quantized: Vec::new(),
            z_q_hat: Vec::new(),
            residual: Vec::new(),
        };
        for h in level_res.into_iter().flatten() {
            let f = pool(&residual, d, h);
            let idx: Vec<u32> = rows(&f, d).map(|r| self.codebook.nearest(r) as u32).collect();
            let q: Vec<f64> = idx.iter().flat_map(|&k| self.codebook.entry(k as usize).iter().copied()).collect();
            let up = resample_temporal(&q, d, n);
            for i in 0..n * d {
                residual[i] -= up[i];
                z_hat[i] += up[i];
            }
            out.resolutions.push(h);
            out.indices.push(idx);
            out.features.push(f);
            out.per_scale_quantized.push(q);
        }
        out.z_q_hat = z_hat;
        out.residual = residual;
        Ok(out)
    }

    /// Reconstructs the dequantized `n × d` latent from indices alone.
    pub fn dequantize(&self, indices: &[Vec<u32>], n: usize) -> Result<Vec<f64>> {
        let d = self.codebook.dim;
        let expect = schedule(n, &self.config.divisors);
        if indices.len() != expect.len() || indices.iter().zip(&expect).any(|(i, &h)| i.len() != h) {
            return Err(ModelError::Validation(format!("indices do not match the schedule {expect:?} for n = {n}")));
        }
        let mut z_hat = vec![0.0; n * d];
        for idx in indices {
            if let Some(&bad) = idx.iter().find(|&&k| k as usize >= self.codebook.size) {
                return Err(ModelError::Validation(format!("codebook index {bad} out of range")));
            }
            let q: Vec<f64> = idx.iter().flat_map(|&k| self.codebook.entry(k as usize).iter().copied()).collect();
            let up = resample_temporal(&q, d, n);
            for i in 0..n * d {
                z_hat[i] += up[i];
            }
        }
        Ok(z_hat)
    }

    /// Quantizes a padded batch `z`: `[B, n_pad, d]` with per-sample valid
    /// lengths `lengths`.
    pub fn quantize(&self, z: &Tensor, lengths: &[usize]) -> Result<QuantOutput> {
        if !self.codebook.initialized {
            return Err(ModelError::Config("codebook used before initialization".into()));
        }
        let (b, n_pad, d) = z.dims3()?;
        if d != self.codebook.dim || lengths.len() != b || lengths.iter().any(|&n| n == 0 || n > n_pad) {
            return Err(ModelError::Shape(format!("quantizer input {:?} with lengths {lengths:?}", z.dims())));
        }
        let zv = z.to_dtype(candle_core::DType::F64)?.to_vec3::<f64>()?;
        let mut sequences = Vec::with_capacity(b);
        let mut hat = vec![0.0; b * n_pad * d];
        for (i, &n) in lengths.iter().enumerate() {
            let flat: Vec<f64> = zv[i][..n].iter().flatten().copied().collect();
            let s = self.quantize_sequence(&flat)?;
            hat[i * n_pad * d..i * n_pad * d + n * d].copy_from_slice(&s.z_q_hat);
            sequences.push(s);
        }
        let (dt, dev) = (z.dtype(), z.device());
        let z_hat_value = Tensor::from_vec(hat, (b, n_pad, d), dev)?.to_dtype(dt)?;
        let z_st = (z + (&z_hat_value - z)?.detach())?;

        // Commitment loss per level. Pooled features are rebuilt from the
        // input tensor so gradients reach the encoder: the pooled residual at
        // a level is `P z - P (sum of earlier upsampled scales)`.
        let levels = self.config.divisors.len();
        let mut commit = Vec::with_capacity(levels);
        let mut scale_pos = vec![0usize; b];
        let mut cum: Vec<Vec<f64>> = lengths.iter().map(|&n| vec![0.0; n * d]).collect();
        for level in 0..levels {
            let h_pad = sequences.iter().filter_map(|s| s.level_res[level]).max().unwrap_or(0);
            if h_pad == 0 {
                commit.push(Tensor::zeros((), dt, dev)?);
                continue;
            }
            let mut pm = vec![0.0; b * h_pad * n_pad];
            let mut offset = vec![0.0; b * h_pad * d];
            let mut ent = vec![0.0; b * h_pad * d];
            let mut mask = vec![0.0; b * h_pad];
            for (i, s) in sequences.iter().enumerate() {
                let Some(h) = s.level_res[level] else { continue };
                let n = lengths[i];
                pm[i * h_pad * n_pad..(i + 1) * h_pad * n_pad].copy_from_slice(&pool_matrix(n, h, n_pad, h_pad));
                let v = scale_pos[i];
                let pc = pool(&cum[i], d, h);
                offset[i * h_pad * d..i * h_pad * d + h * d].copy_from_slice(&pc);
                ent[i * h_pad * d..i * h_pad * d + h * d].copy_from_slice(&s.per_scale_quantized[v]);
                mask[i * h_pad..i * h_pad + h].iter_mut().for_each(|m| *m = 1.0);
                let up = resample_temporal(&s.per_scale_quantized[v], d, n);
                cum[i].iter_mut().zip(&up).for_each(|(c, u)| *c += u);
                scale_pos[i] += 1;
            }
            let pm = Tensor::from_vec(pm, (b, h_pad, n_pad), dev)?.to_dtype(dt)?;
            let offset = Tensor::from_vec(offset, (b, h_pad, d), dev)?.to_dtype(dt)?;
            let ent = Tensor::from_vec(ent, (b, h_pad, d), dev)?.to_dtype(dt)?;
            let mask = Tensor::from_vec(mask, (b, h_pad), dev)?.to_dtype(dt)?;
            let feats = (pm.matmul(&z.contiguous()?)? - offset)?;
            commit.push(commitment_loss(&feats, &ent, &mask)?);
        }
        Ok(QuantOutput { z_q_hat: z_st, z_q_hat_value: z_hat_value, sequences, commit_per_scale: commit })
    }

    /// EMA update from a batch of assignments. Usage counts accumulate until
    /// [`Quantizer::reseed_dead`] resets them.
    pub fn update(&mut self, assignments: &[(usize, Vec<f64>)]) {
        if assignments.is_empty() {
            return;
        }
        let cb = &mut self.codebook;
        let (k_total, d) = (cb.size, cb.dim);
        let mut counts = vec![0.0; k_total];
        let mut sums = vec![0.0; k_total * d];
        for (k, f) in assignments {
            counts[*k] += 1.0;
            cb.usage_count[*k] += 1;
            for c in 0..d {
                sums[k * d + c] += f[c];
            }
        }
        let g = self.config.ema_decay;
        for k in 0..k_total {
            cb.ema_cluster_size[k] = g * cb.ema_cluster_size[k] + (1.0 - g) * counts[k];
            for c in 0..d {
                cb.ema_embed_sum[k * d + c] = g * cb.ema_embed_sum[k * d + c] + (1.0 - g) * sums[k * d + c];
            }
        }
        let total: f64 = cb.ema_cluster_size.iter().sum();
        let eps = self.config.smoothing;
        for k in usize::from(self.config.pin_zero)..k_total {
            let size = (cb.ema_cluster_size[k] + eps) / (total + k_total as f64 * eps) * total;
            for c in 0..d {
                cb.entries[k * d + c] = cb.ema_embed_sum[k * d + c] / size;
            }
        }
    }

    /// Replaces entries unused since the last call with random features and
    /// resets usage counts. Returns the number of re-seeded entries.
    pub fn reseed_dead(&mut self, features: &[Vec<f64>], rng: &mut Rng) -> usize {
        let first = self.first_free();
        let cb = &mut self.codebook;
        let d = cb.dim;
        let mut n = 0;
        if !features.is_empty() {
            for k in first..cb.size {
                if cb.usage_count[k] == 0 {
                    let f = features.choose(rng).expect("non-empty");
                    cb.entries[k * d..(k + 1) * d].copy_from_slice(f);
                    cb.ema_embed_sum[k * d..(k + 1) * d].copy_from_slice(f);
                    cb.ema_cluster_size[k] = 1.0;
                    n += 1;
                }
            }
        }
        cb.usage_count.iter_mut().for_each(|u| *u = 0);
        n
    }
}

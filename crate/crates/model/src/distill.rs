//! Multi-view teacher–student self-distillation on the continuous latent.
//!
//! Each motion yields two global views (full length, light noise) and four
//! local views (random crops, time-warp, noise and a masked span). The student
//! encoder pools its continuous latent over every view and projects it; the
//! teacher (an EMA copy) does the same for global views only. The loss is the
//! mean KL divergence from the centered, sharpened teacher distribution to the
//! student distribution over all non-identical (teacher view, student view)
//! pairs.

use candle_core::{Tensor, D};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::MotionItem;
use crate::error::{ModelError, Result};
use crate::nn::{scalar, Linear};
use crate::params::{ParamStore, Scope};
use motionflow_core::rng::Rng;

pub const MIN_VIEW_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub crop_min: f64,
    pub crop_max: f64,
    pub warp_min: f64,
    pub warp_max: f64,
    /// Noise std on local views (normalized units).
    pub noise: f64,
    /// Noise std on global views.
    pub global_noise: f64,
    /// Fraction of a local view zeroed and masked as one span.
    pub mask_fraction: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            n_global: 2,
            n_local: 4,
            crop_min: 0.3,
            crop_max: 0.7,
            warp_min: 0.8,
            warp_max: 1.2,
            noise: 0.01,
            global_noise: 0.005,
            mask_fraction: 0.1,
        }
    }
}

impl ViewConfig {
    /// No noise, no warp, no masking: local views are raw crops.
    pub fn identity() -> Self {
        Self { warp_min: 1.0, warp_max: 1.0, noise: 0.0, global_noise: 0.0, mask_fraction: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub item: MotionItem,
    /// `(start, length)` of the crop in the source sequence.
    pub crop: (usize, usize),
    pub warp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub global: Vec<View>,
    pub local: Vec<View>,
}

impl ViewSet {
    pub fn all(&self) -> impl Iterator<Item = &View> {
        self.global.iter().chain(&self.local)
    }
}

/// Resamples `len × c` frames to `out_len` with aligned endpoints.
pub fn time_warp(frames: &[f32], c: usize, out_len: usize) -> Vec<f32> {
    let len = frames.len() / c;
    if len == out_len {
        return frames.to_vec();
    }
    let mut out = Vec::with_capacity(out_len * c);
    for i in 0..out_len {
        let pos = if out_len == 1 { 0.0 } else { i as f64 * (len - 1) as f64 / (out_len - 1) as f64 };
        let a = (pos.floor() as usize).min(len - 1);
        let b = (a + 1).min(len - 1);
        let w = pos - a as f64;
        for k in 0..c {
            let (xa, xb) = (frames[a * c + k] as f64, frames[b * c + k] as f64);
            out.push((xa + w * (xb - xa)) as f32);
        }
    }
    out
}

fn add_noise(frames: &mut [f32], std: f64, rng: &mut Rng) {
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("std is positive");
        frames.iter_mut().for_each(|v| *v += n.sample(rng) as f32);
    }
}

/// Augmented views of one normalized motion (`T × c`).
pub fn make_views(item: &MotionItem, c: usize, cfg: &ViewConfig, rng: &mut Rng) -> Result<ViewSet> {
    let t = item.len();
    let min_crop = (cfg.crop_min * t as f64).ceil() as usize;
    if t < MIN_VIEW_FRAMES || min_crop < 2 {
        return Err(ModelError::Validation(format!("{t} frames is too short for distillation views")));
    }
    let global = (0..cfg.n_global)
        .map(|_| {
            let mut frames = item.frames.clone();
            add_noise(&mut frames, cfg.global_noise, rng);
            View { item: MotionItem { frames, mask: item.mask.clone() }, crop: (0, t), warp: 1.0 }
        })
        .collect();
    let mut local = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        let frac = rng.random_range(cfg.crop_min..=cfg.crop_max);
        let len = ((frac * t as f64).round() as usize).clamp(min_crop, (cfg.crop_max * t as f64).floor() as usize);
        let start = rng.random_range(0..=t - len);
        let crop = &item.frames[start * c..(start + len) * c];
        let warp = if cfg.warp_max > cfg.warp_min { rng.random_range(cfg.warp_min..=cfg.warp_max) } else { cfg.warp_min };
        let out_len = ((len as f64 / warp).round() as usize).max(2);
        let mut frames = time_warp(crop, c, out_len);
        let mut mask: Vec<bool> = if out_len == len { item.mask[start..start + len].to_vec() } else { vec![true; out_len] };
        add_noise(&mut frames, cfg.noise, rng);
        let span = (cfg.mask_fraction * out_len as f64).round() as usize;
        if span > 0 && span < out_len {
            let s0 = rng.random_range(0..=out_len - span);
            for i in s0..s0 + span {
                mask[i] = false;
                frames[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        local.push(View { item: MotionItem { frames, mask }, crop: (start, len), warp });
    }
    Ok(ViewSet { global, local })
}

/// Two-layer projection head followed by L2 normalization.
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(s: &Scope, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&s.sub("fc1"), d_in, hidden)?, fc2: Linear::new(&s.sub("fc2"), hidden, d_out)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.fc2.forward(&self.fc1.forward(x)?.gelu()?)?;
        let norm = (y.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(y.broadcast_div(&norm)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub center_momentum: f64,
    pub teacher_momentum: f64,
    pub head_hidden: usize,
    pub head_out: usize,
    pub lambda_peak: f64,
    /// Sequences per batch that receive views (all if 0).
    pub subset: usize,
    pub views: ViewConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_teacher: 0.04,
            tau_student: 0.07,
            center_momentum: 0.9,
            teacher_momentum: 0.996,
            head_hidden: 128,
            head_out: 64,
            lambda_peak: 0.02,
            subset: 8,
            views: ViewConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_teacher > 0.0 && self.tau_student > 0.0) {
            return Err(ModelError::Config("distill temperatures must be positive".into()));
        }
        for (name, m) in [("center_momentum", self.center_momentum), ("teacher_momentum", self.teacher_momentum)] {
            if !(m > 0.0 && m < 1.0) {
                return Err(ModelError::Config(format!("distill.{name} must be in (0, 1)")));
            }
        }
        if self.lambda_peak < 0.0 {
            return Err(ModelError::Config("distill.lambda_peak must be >= 0".into()));
        }
        Ok(())
    }
}

/// Distillation weight: linear warmup over the first 20% of steps, hold,
/// linear decay to 0 over the last 20%.
pub fn lambda_schedule(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = step as f64 / total as f64;
    if p <= 0.2 {
        peak * p / 0.2
    } else if p <= 0.8 {
        peak
    } else {
        peak * ((1.0 - p) / 0.2).max(0.0)
    }
}

/// `softmax((logits - center) / tau)` along the last axis.
pub fn teacher_distribution(logits: &Tensor, center: &Tensor, tau: f64) -> Result<Tensor> {
    let z = (logits.broadcast_sub(center)? / tau)?;
    Ok(candle_nn::ops::softmax(&z, D::Minus1)?)
}

/// `log_softmax(logits / tau)` along the last axis.
pub fn student_log_distribution(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let z = (logits / tau)?;
    let max = z.max_keepdim(D::Minus1)?.detach();
    let s = z.broadcast_sub(&max)?;
    let lse = s.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_sub(&lse)?)
}

/// Mean KL(p_t ‖ p_s) over (teacher view `i`, student view `j`) pairs with
/// `i != j` (teacher view `i` is student view `i`). Teacher rows must sum to
/// one within 1e-6 in float64, or within 1e-4 in lower precision, where
/// float32 rounding of a sharpened softmax already reaches 1e-6.
pub fn distillation_loss(teacher: &[Tensor], student_log: &[Tensor]) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (i, pt) in teacher.iter().enumerate() {
        let tol = if pt.dtype() == candle_core::DType::F64 { 1e-6 } else { 1e-4 };
        let sums = pt.to_dtype(candle_core::DType::F64)?.sum(D::Minus1)?.to_vec1::<f64>()?;
        if let Some(s) = sums.iter().find(|s| (*s - 1.0).abs() > tol) {
            return Err(ModelError::Validation(format!("teacher distribution sums to {s}")));
        }
        let pt = pt.detach();
        let log_pt = (pt.clone() + 1e-30)?.log()?;
        for (j, ls) in student_log.iter().enumerate() {
            if i == j {
                continue;
            }
            let kl = pt.mul(&(&log_pt - ls)?)?.sum(D::Minus1)?.mean_all()?;
            terms.push(kl);
        }
    }
    if terms.is_empty() {
        return Err(ModelError::Validation("no distillation pairs".into()));
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// `c <- m c + (1 - m) mean(logits)`.
pub fn update_center(center: &mut [f64], batch_mean: &[f64], momentum: f64) {
    for (c, b) in center.iter_mut().zip(batch_mean) {
        *c = momentum * *c + (1.0 - momentum) * b;
    }
}

/// `teacher <- m teacher + (1 - m) student` for every teacher parameter
/// under `prefixes`.
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, prefixes: &[&str], momentum: f64) -> Result<()> {
    for (name, tv) in teacher.vars_with_prefix(prefixes) {
        let sv = student.var(&name).ok_or_else(|| ModelError::Checkpoint(format!("student has no parameter {name}")))?;
        if sv.dims() != tv.dims() {
            return Err(ModelError::Checkpoint(format!("parameter {name} differs in shape between teacher and student")));
        }
        let upd = ((tv.as_tensor() * momentum)? + (sv.as_tensor().detach() * (1.0 - momentum))?)?;
        tv.set(&upd)?;
    }
    Ok(())
}

/// Per-row batch mean of `[B, K]` logits.
pub fn batch_mean(logits: &Tensor) -> Result<Vec<f64>> {
    Ok(logits.to_dtype(candle_core::DType::F64)?.mean(0)?.to_vec1::<f64>()?)
}

/// Maximum probability of a distribution tensor (testing helper).
pub fn max_prob(p: &Tensor) -> Result<f64> {
    scalar(&p.max_all()?)
}

//! Shared fixtures for the model integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use motionflow_core::rng::{substream, Rng};
use motionflow_model::autoencoder::AutoencoderConfig;
use motionflow_model::batch::MotionItem;
use motionflow_model::params::ParamStore;
use motionflow_model::vae::VaeConfig;

pub fn tiny_vae() -> VaeConfig {
    VaeConfig {
        channels: 27,
        stride: 4,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_total: 8,
        d_q: 2,
        max_latent_len: 8,
        dropout: 0.0,
    }
}

pub fn tiny_autoencoder() -> AutoencoderConfig {
    let mut cfg = AutoencoderConfig { vae: tiny_vae(), ..Default::default() };
    cfg.rvq.codebook_size = 16;
    cfg.distill.head_hidden = 16;
    cfg.distill.head_out = 8;
    cfg
}

pub fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(randn(rng, n), shape, &Device::Cpu).unwrap()
}

/// Random normalized motion with `valid` of `len` frames marked valid.
pub fn motion_item(rng: &mut Rng, len: usize, valid: usize, channels: usize) -> MotionItem {
    let frames = (0..len * channels).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    MotionItem { frames, mask: (0..len).map(|t| t < valid).collect() }
}

/// Adds Gaussian noise of scale `std` to every parameter so zero-initialized
/// layers carry gradient.
pub fn jitter(store: &ParamStore, std: f64, seed: u64) {
    let mut rng = substream(seed, "jitter", &[]);
    for (_, v) in store.vars() {
        let noise = Tensor::from_vec(randn(&mut rng, v.elem_count()), v.shape(), &Device::Cpu).unwrap().to_dtype(v.dtype()).unwrap();
        v.set(&(v.as_tensor() + (noise * std).unwrap()).unwrap()).unwrap();
    }
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub struct GradReport {
    pub probes: usize,
    pub max_rel: f64,
}

/// Compares backprop gradients of `loss` to central differences on random
/// scalar probes of the parameters under `prefixes`. Probes whose gradient
/// is negligible in both estimates are redrawn.
pub fn finite_difference_check(store: &ParamStore, prefixes: &[&str], probes: usize, seed: u64, loss: impl Fn() -> Tensor) -> GradReport {
    let h = 1e-6;
    let vars = store.vars_with_prefix(prefixes);
    assert!(!vars.is_empty(), "no parameters under {prefixes:?}");
    let grads = loss().backward().unwrap();
    let mut rng = substream(seed, "probes", &[]);
    let mut max_rel: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < probes {
        attempts += 1;
        assert!(attempts < probes * 50, "too few parameters with measurable gradient");
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let i = rng.random_range(0..var.elem_count());
        let analytic = grads.get(var.as_tensor()).map(|g| to_vec(g)[i]).unwrap_or(0.0);
        let base = to_vec(var.as_tensor());
        let eval_at = |x: f64| {
            let mut v = base.clone();
            v[i] = x;
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
            scalar(&loss())
        };
        let numeric = (eval_at(base[i] + h) - eval_at(base[i] - h)) / (2.0 * h);
        var.set(&Tensor::from_vec(base, var.shape(), &Device::Cpu).unwrap()).unwrap();
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-5 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        assert!(rel < 1e-4, "{name}[{i}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})");
        max_rel = max_rel.max(rel);
        done += 1;
    }
    GradReport { probes: done, max_rel }
}

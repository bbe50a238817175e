//! Numerical oracles for the hybrid-representation theory.
//!
//! Two claims are checked without any trained network:
//! - Bayes reconstruction risk `R*(S) = E[Var(X | S)]` can only drop when a
//!   second representation is added, verified by exact enumeration over
//!   finite joint distributions;
//! - the irreducible flow-matching error `E[Var(u | z_t)]` is bounded by
//!   `E‖z1 − E[z1|C]‖² / (1−t)²`, verified in closed form for scalar
//!   Gaussians and by Monte Carlo for mixture endpoints.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{substream, Rng};

/// Largest `t` accepted by the bound computations.
pub const T_MAX: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteJointDistribution {
    /// `(x, s1, s2)` atoms.
    pub support: Vec<(Vec<f64>, u32, u32)>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    S1,
    S2,
    Joint,
}

impl FiniteJointDistribution {
    pub fn new(support: Vec<(Vec<f64>, u32, u32)>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(CoreError::Validation("empty support".into()));
        }
        if support.len() != probs.len() {
            return Err(CoreError::Validation("support and probabilities differ in length".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(CoreError::Validation("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoreError::Validation(format!("probabilities sum to {total}")));
        }
        let d = support[0].0.len();
        if support.iter().any(|(x, _, _)| x.len() != d || x.iter().any(|v| !v.is_finite())) {
            return Err(CoreError::Validation("atoms must be finite vectors of equal length".into()));
        }
        Ok(Self { support, probs })
    }

    /// Random distribution with `n` atoms, normalized in a way that sums to 1
    /// within 1e-12.
    pub fn random(rng: &mut Rng, n: usize, dim: usize, labels1: u32, labels2: u32) -> Self {
        let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let support = (0..n)
            .map(|_| {
                let x = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                (x, rng.random_range(0..labels1), rng.random_range(0..labels2))
            })
            .collect();
        Self::new(support, w).expect("constructed distribution is valid")
    }
}

fn key(rep: Representation, s1: u32, s2: u32) -> (u32, u32) {
    match rep {
        Representation::S1 => (s1, 0),
        Representation::S2 => (s2, 0),
        Representation::Joint => (s1, s2),
    }
}

/// Exact `E[tr Var(X | S)]` by enumeration.
///
/// Atoms are summed in a canonical order within each label group, so the
/// result does not depend on how the support is listed.
pub fn bayes_risk(dist: &FiniteJointDistribution, rep: Representation) -> Result<f64> {
    if dist.support.is_empty() {
        return Err(CoreError::Validation("empty support".into()));
    }
    let mut groups: BTreeMap<(u32, u32), Vec<(&[f64], f64)>> = BTreeMap::new();
    for ((x, s1, s2), &p) in dist.support.iter().zip(&dist.probs) {
        groups.entry(key(rep, *s1, *s2)).or_default().push((x, p));
    }
    let mut risk = 0.0;
    for members in groups.values_mut() {
        members.sort_by(|a, b| {
            a.0.iter()
                .zip(b.0)
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.total_cmp(&b.1))
        });
        let mass: f64 = members.iter().map(|m| m.1).sum();
        if mass == 0.0 {
            continue;
        }
        let d = members[0].0.len();
        let mut mean = vec![0.0; d];
        for (x, p) in members.iter() {
            for k in 0..d {
                mean[k] += p * x[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= mass);
        for (x, p) in members.iter() {
            risk += p * x.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>();
        }
    }
    Ok(risk)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub risk_s1: f64,
    pub risk_s2: f64,
    pub risk_joint: f64,
    /// `R*(joint) <= min(R*(S1), R*(S2)) + 1e-12`.
    pub holds: bool,
    /// Joint risk is below the minimum by more than 1e-12.
    pub strict: bool,
}

pub fn check_monotonicity(dist: &FiniteJointDistribution) -> Result<MonotonicityReport> {
    let risk_s1 = bayes_risk(dist, Representation::S1)?;
    let risk_s2 = bayes_risk(dist, Representation::S2)?;
    let risk_joint = bayes_risk(dist, Representation::Joint)?;
    let best = risk_s1.min(risk_s2);
    Ok(MonotonicityReport { risk_s1, risk_s2, risk_joint, holds: risk_joint <= best + 1e-12, strict: risk_joint < best - 1e-12 })
}

/// Scalar case `z0 ~ N(0,1)`, `z1 ~ N(0, σ1²)`: returns `(E[Var(u|z_t)], bound)`.
pub fn gaussian_irreducible_variance(sigma1: f64, t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0 && t <= T_MAX) {
        return Err(CoreError::Validation(format!("t must lie in (0, {T_MAX}], got {t}")));
    }
    if !(sigma1 >= 0.0 && sigma1.is_finite()) {
        return Err(CoreError::Validation(format!("sigma1 must be finite and >= 0, got {sigma1}")));
    }
    let s2 = sigma1 * sigma1;
    let var_u = 1.0 + s2;
    let var_zt = (1.0 - t).powi(2) + t * t * s2;
    let cov = t * s2 - (1.0 - t);
    let exact = (var_u - cov * cov / var_zt).max(0.0);
    let bound = s2 / (1.0 - t).powi(2);
    Ok((exact, bound))
}

/// Per-dimension endpoint model `p(z1 | C)`: equal-weight Gaussian modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointModel {
    pub means: Vec<f64>,
    pub sigma: f64,
}

impl EndpointModel {
    pub fn unimodal(sigma: f64) -> Self {
        Self { means: vec![0.0], sigma }
    }

    pub fn bimodal(offset: f64, sigma: f64) -> Self {
        Self { means: vec![-offset, offset], sigma }
    }

    /// `E[(z1 − E[z1|C])²]` per dimension.
    pub fn conditional_variance(&self) -> f64 {
        let m = self.means.iter().sum::<f64>() / self.means.len() as f64;
        let spread = self.means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.means.len() as f64;
        self.sigma * self.sigma + spread
    }

    /// Upper bound `d · Var(z1|C) / (1−t)²`.
    pub fn bound(&self, dim: usize, t: f64) -> f64 {
        dim as f64 * self.conditional_variance() / (1.0 - t).powi(2)
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        let m = self.means[rng.random_range(0..self.means.len())];
        let e: f64 = StandardNormal.sample(rng);
        m + self.sigma * e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloPoint {
    pub t: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub bound: f64,
    pub bin_size: usize,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub dim: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub points: Vec<MonteCarloPoint>,
}

impl MonteCarloReport {
    pub fn all_pass(&self) -> bool {
        self.points.iter().all(|p| p.passes)
    }
}

/// Residuals of `u` after a within-bin linear regression on `z_t`.
fn binned_residuals(mut pairs: Vec<(f64, f64)>, bin: usize) -> Vec<f64> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(pairs.len());
    let n_bins = (pairs.len() / bin).max(1);
    for b in 0..n_bins {
        let lo = b * pairs.len() / n_bins;
        let hi = (b + 1) * pairs.len() / n_bins;
        let chunk = &pairs[lo..hi];
        let n = chunk.len() as f64;
        let mx = chunk.iter().map(|p| p.0).sum::<f64>() / n;
        let my = chunk.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = chunk.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = chunk.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        // n/(n-2) corrects the two fitted degrees of freedom.
        let dof = (n / (n - 2.0)).sqrt();
        out.extend(chunk.iter().map(|p| (p.1 - my - slope * (p.0 - mx)) * dof));
    }
    out
}

/// Estimates `E‖Var(u | z_t)‖` for independent dimensions and compares it
/// with the endpoint-concentration bound at 3 standard errors.
pub fn monte_carlo_bound_check(model: &EndpointModel, dim: usize, t_grid: &[f64], n_samples: usize, seed: u64) -> Result<MonteCarloReport> {
    if dim == 0 || n_samples < 8 {
        return Err(CoreError::Validation("need dim >= 1 and at least 8 samples".into()));
    }
    const TARGET_BIN: usize = 250;
    const MIN_BIN: usize = 50;
    let mut bin = TARGET_BIN.min(n_samples);
    if bin < MIN_BIN {
        log::warn!("only {n_samples} samples; widening conditional-variance bins to the full sample");
        bin = n_samples;
    }
    let mut points = Vec::with_capacity(t_grid.len());
    for (ti, &t) in t_grid.iter().enumerate() {
        if !(t > 0.0 && t <= T_MAX) {
            return Err(CoreError::Validation(format!("t must lie in (0, {T_MAX}], got {t}")));
        }
        let mut rng = substream(seed, "monte-carlo", &[ti as u64]);
        let mut total = vec![0.0; n_samples];
        for _ in 0..dim {
            let pairs: Vec<(f64, f64)> = (0..n_samples)
                .map(|_| {
                    let z0: f64 = StandardNormal.sample(&mut rng);
                    let z1 = model.sample(&mut rng);
                    (t * z1 + (1.0 - t) * z0, z1 - z0)
                })
                .collect();
            for (acc, r) in total.iter_mut().zip(binned_residuals(pairs, bin)) {
                *acc += r * r;
            }
        }
        let n = n_samples as f64;
        let estimate = total.iter().sum::<f64>() / n;
        let var = total.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (n - 1.0);
        let std_error = (var / n).sqrt();
        let bound = model.bound(dim, t);
        points.push(MonteCarloPoint { t, estimate, std_error, bound, bin_size: bin, passes: estimate <= bound + 3.0 * std_error });
    }
    Ok(MonteCarloReport { dim, n_samples, seed, points })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// One check in an oracle certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateCheck {
    pub name: String,
    pub passed: bool,
    /// Smallest slack observed (positive means the claim held with room).
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCertificate {
    pub seed: u64,
    pub n_samples: usize,
    pub checks: Vec<CertificateCheck>,
}

impl OracleCertificate {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const T_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Runs every oracle check with the given seed and Monte Carlo size.
pub fn run_certificate(seed: u64, n_samples: usize) -> Result<OracleCertificate> {
    let mut checks = Vec::new();

    let mut rng = substream(seed, "oracle-distributions", &[]);
    let mut margin = f64::INFINITY;
    let mut violations = 0;
    let mut strict = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..24);
        let dim = rng.random_range(1..4);
        let l1 = rng.random_range(1..5);
        let l2 = rng.random_range(1..5);
        let d = FiniteJointDistribution::random(&mut rng, n, dim, l1, l2);
        let r = check_monotonicity(&d)?;
        margin = margin.min(r.risk_s1.min(r.risk_s2) - r.risk_joint);
        violations += (!r.holds) as usize;
        strict += r.strict as usize;
    }
    checks.push(CertificateCheck {
        name: "bayes-risk-monotonicity".into(),
        passed: violations == 0,
        margin,
        detail: format!("1000 random distributions, {violations} violations, {strict} strict"),
    });

    let mut violations = 0;
    let mut margin = f64::INFINITY;
    let sigmas: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
    for &s in &sigmas {
        for &t in &T_GRID {
            let (exact, bound) = gaussian_irreducible_variance(s, t)?;
            margin = margin.min(bound - exact);
            violations += (exact > bound + 1e-12) as usize;
        }
    }
    checks.push(CertificateCheck {
        name: "gaussian-closed-form-bound".into(),
        passed: violations == 0,
        margin,
        detail: format!("{} grid points, {violations} violations", sigmas.len() * T_GRID.len()),
    });

    for (name, model) in [("coupled", EndpointModel::unimodal(0.3)), ("single-branch", EndpointModel::bimodal(1.0, 0.3))] {
        let rep = monte_carlo_bound_check(&model, 2, &T_GRID, n_samples, seed)?;
        let margin =
            rep.points.iter().map(|p| (p.bound + 3.0 * p.std_error - p.estimate) / p.std_error.max(1e-300)).fold(f64::INFINITY, f64::min);
        checks.push(CertificateCheck {
            name: format!("monte-carlo-bound-{name}"),
            passed: rep.all_pass(),
            margin,
            detail: format!("dim 2, n {n_samples}, margin in standard errors"),
        });
    }

    let coupled = EndpointModel::unimodal(0.3);
    let single = EndpointModel::bimodal(1.0, 0.3);
    let gap = T_GRID.iter().map(|&t| single.bound(2, t) - coupled.bound(2, t)).fold(f64::INFINITY, f64::min);
    checks.push(CertificateCheck {
        name: "concentration-tightens-bound".into(),
        passed: gap > 0.0,
        margin: gap,
        detail: "single-branch minus coupled bound, minimum over t".into(),
    });

    let one_minus: Vec<f64> = T_GRID.iter().map(|t| 1.0 - t).collect();
    let bounds: Vec<f64> = T_GRID.iter().map(|&t| coupled.bound(1, t)).collect();
    let slope = log_log_slope(&one_minus, &bounds);
    checks.push(CertificateCheck {
        name: "bound-divergence-slope".into(),
        passed: (slope + 2.0).abs() <= 0.1,
        margin: 0.1 - (slope + 2.0).abs(),
        detail: format!("log-log slope {slope:.6} against 1-t"),
    });

    Ok(OracleCertificate { seed, n_samples, checks })
}

//! Kinematic evaluation metrics.
//!
//! Generated motions are compared through a fixed-length [`kinematic_features`]
//! vector computed in the body frame of the desk skeleton: a Fréchet distance
//! between Gaussian fits, prototype-based 32-candidate retrieval, and pairwise
//! diversity. Absolute values only make sense relative to each other.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::rng::substream;

const PELVIS: usize = 0;
const L_HIP: usize = 1;
const L_FOOT: usize = 2;
const R_HIP: usize = 3;
const R_FOOT: usize = 4;
const L_HAND: usize = 6;
const R_HAND: usize = 8;
const DESK_JOINTS: usize = 9;

/// Length of the vector returned by [`kinematic_features`].
pub const FEATURE_DIM: usize = 35;

/// Candidate pool size of the retrieval protocol.
pub const RETRIEVAL_POOL: usize = 32;

/// Mean Euclidean distance over valid frames and joints.
pub fn joint_position_error(pred: &[f32], target: &[f32], num_joints: usize, mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() * num_joints * 3 {
        return Err(CoreError::Validation("prediction, target and mask shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, &valid) in mask.iter().enumerate() {
        if !valid {
            continue;
        }
        for j in 0..num_joints {
            let o = (t * num_joints + j) * 3;
            let d: f64 = (0..3).map(|k| (pred[o + k] as f64 - target[o + k] as f64).powi(2)).sum();
            sum += d.sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::Validation("no valid frames".into()));
    }
    Ok(sum / n as f64)
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Upward crossings of `high`, re-armed only after falling below `low`.
pub fn count_crossings(signal: &[f64], high: f64, low: f64) -> usize {
    let mut armed = true;
    let mut count = 0;
    for &v in signal {
        if armed && v >= high {
            count += 1;
            armed = false;
        } else if !armed && v <= low {
            armed = true;
        }
    }
    count
}

fn range(v: &[f64]) -> f64 {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Half-width of the centered moving average applied to joint positions
/// before any feature is computed.
pub const SMOOTH_HALF_WIDTH: usize = 2;

/// Centered moving average over `SMOOTH_HALF_WIDTH` frames on each side; the
/// window shrinks at the ends.
fn smooth_positions(rows: &[&[f32]], width: usize) -> Vec<f64> {
    let t = rows.len();
    let mut out = vec![0.0; t * width];
    for f in 0..t {
        let (a, b) = (f.saturating_sub(SMOOTH_HALF_WIDTH), (f + SMOOTH_HALF_WIDTH).min(t - 1));
        let n = (b - a + 1) as f64;
        for r in &rows[a..=b] {
            for (o, v) in out[f * width..(f + 1) * width].iter_mut().zip(r.iter()) {
                *o += *v as f64 / n;
            }
        }
    }
    out
}

/// Fixed-length kinematic descriptor of one motion (world-space meters),
/// computed on smoothed joint positions so frame-level jitter does not
/// dominate.
///
/// Layout: root displacement in the initial body frame (2), horizontal path
/// length (1), horizontal speed mean/std (2), signed and absolute heading
/// change (2), mean and peak absolute yaw rate (2), body-frame forward and
/// lateral velocity (2), height range of hands and feet relative to the pelvis
/// (4), forward range of hands and feet (4), mean hand height (2), hand-raise
/// counts (2), kick counts (2), jump count (1), per-joint mean speed (9).
pub fn kinematic_features(frames: &[f32], num_joints: usize, fps: f64, mask: &[bool]) -> Result<Vec<f64>> {
    if num_joints != DESK_JOINTS {
        return Err(CoreError::Validation(format!("features need the {DESK_JOINTS}-joint skeleton")));
    }
    if frames.len() != mask.len() * num_joints * 3 {
        return Err(CoreError::Validation("frames and mask disagree".into()));
    }
    let rows: Vec<&[f32]> = frames.chunks(num_joints * 3).zip(mask).filter(|(_, &v)| v).map(|(r, _)| r).collect();
    let t = rows.len();
    if t < 2 {
        return Err(CoreError::Validation("features need at least 2 valid frames".into()));
    }
    let dt = 1.0 / fps;
    let smoothed = smooth_positions(&rows, num_joints * 3);
    let p = |f: usize, j: usize| -> [f64; 3] {
        let r = &smoothed[f * num_joints * 3..];
        [r[j * 3], r[j * 3 + 1], r[j * 3 + 2]]
    };

    // Facing from the hip axis (left minus right), unwrapped.
    let mut yaw = Vec::with_capacity(t);
    for f in 0..t {
        let (l, r) = (p(f, L_HIP), p(f, R_HIP));
        let raw = (l[1] - r[1]).atan2(l[0] - r[0]) - std::f64::consts::FRAC_PI_2;
        let y = match yaw.last() {
            Some(&prev) => prev + wrap_angle(raw - prev),
            None => wrap_angle(raw),
        };
        yaw.push(y);
    }
    let to_body = |v: [f64; 3], a: f64| -> [f64; 3] {
        let (s, c) = a.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
    };

    let mut f = Vec::with_capacity(FEATURE_DIM);
    let root0 = p(0, PELVIS);
    let root1 = p(t - 1, PELVIS);
    let disp = to_body([root1[0] - root0[0], root1[1] - root0[1], 0.0], yaw[0]);
    f.extend([disp[0], disp[1]]);

    let mut speeds = Vec::with_capacity(t - 1);
    let mut fwd = Vec::with_capacity(t - 1);
    let mut lat = Vec::with_capacity(t - 1);
    for k in 0..t - 1 {
        let (a, b) = (p(k, PELVIS), p(k + 1, PELVIS));
        let v = [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt, 0.0];
        speeds.push(v[0].hypot(v[1]));
        let bv = to_body(v, 0.5 * (yaw[k] + yaw[k + 1]));
        fwd.push(bv[0]);
        lat.push(bv[1]);
    }
    f.push(speeds.iter().sum::<f64>() * dt);
    f.extend([mean(&speeds), std_dev(&speeds)]);

    let dyaw: Vec<f64> = yaw.windows(2).map(|w| w[1] - w[0]).collect();
    f.push(yaw[t - 1] - yaw[0]);
    f.push(dyaw.iter().map(|d| d.abs()).sum());
    // Yaw rate over a 5-frame centered window damps frame-level jitter.
    let rates: Vec<f64> = (0..t)
        .map(|k| {
            let (a, b) = (k.saturating_sub(2), (k + 2).min(t - 1));
            ((yaw[b] - yaw[a]) / ((b - a).max(1) as f64 * dt)).abs()
        })
        .collect();
    f.push(mean(&rates));
    f.push(rates.iter().cloned().fold(0.0, f64::max));
    f.extend([mean(&fwd), mean(&lat)]);

    let effectors = [L_HAND, R_HAND, L_FOOT, R_FOOT];
    let rel = |j: usize| -> Vec<[f64; 3]> {
        (0..t)
            .map(|k| {
                let (a, o) = (p(k, j), p(k, PELVIS));
                to_body([a[0] - o[0], a[1] - o[1], a[2] - o[2]], yaw[k])
            })
            .collect()
    };
    let rels: Vec<Vec<[f64; 3]>> = effectors.iter().map(|&j| rel(j)).collect();
    for r in &rels {
        f.push(range(&r.iter().map(|v| v[2]).collect::<Vec<_>>()));
    }
    for r in &rels {
        f.push(range(&r.iter().map(|v| v[0]).collect::<Vec<_>>()));
    }
    let hand_z: Vec<Vec<f64>> = rels[..2].iter().map(|r| r.iter().map(|v| v[2]).collect()).collect();
    f.extend(hand_z.iter().map(|z| mean(z)));
    for z in &hand_z {
        f.push(count_crossings(z, 0.45, 0.15) as f64);
    }
    for r in &rels[2..] {
        let x: Vec<f64> = r.iter().map(|v| v[0]).collect();
        f.push(count_crossings(&x, 0.55, 0.25) as f64);
    }
    let pz: Vec<f64> = (0..t).map(|k| p(k, PELVIS)[2]).collect();
    let base = pz.iter().cloned().fold(f64::INFINITY, f64::min);
    let lift: Vec<f64> = pz.iter().map(|z| z - base).collect();
    f.push(count_crossings(&lift, 0.12, 0.04) as f64);

    for j in 0..num_joints {
        let s: f64 = (0..t - 1)
            .map(|k| {
                let (a, b) = (p(k, j), p(k + 1, j));
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt() / dt
            })
            .sum();
        f.push(s / (t - 1) as f64);
    }
    debug_assert_eq!(f.len(), FEATURE_DIM);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Validation("non-finite kinematic feature".into()));
    }
    Ok(f)
}

/// Smallest per-dimension scale used for standardization, in feature units.
/// Dimensions that are nearly constant on ground truth (constant-speed walks
/// give a root-speed spread of a few mm/s) would otherwise turn tiny
/// deviations into hundreds of standard deviations.
pub const FEATURE_STD_FLOOR: f64 = 0.05;

/// Per-dimension standardization fitted on ground-truth training features.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStandardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let d = features.first().ok_or_else(|| CoreError::Validation("no features to fit".into()))?.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for f in features {
            for k in 0..d {
                std[k] += (f[k] - mean[k]).powi(2) / n;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt().max(FEATURE_STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn gaussian_fit(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(CoreError::Validation(format!("Fréchet distance needs >= 2 samples, got {}", set.len())));
    }
    let d = set[0].len();
    if set.iter().any(|v| v.len() != d) {
        return Err(CoreError::Validation("feature vectors differ in length".into()));
    }
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in set {
        mu += DVector::from_column_slice(v) / n;
    }
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mu, cov))
}

/// Symmetric PSD square root with negative eigenvalues clipped at 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// The cross term uses `tr((Σ_A Σ_B)^{1/2}) = tr((S Σ_B S)^{1/2})` with
/// `S = Σ_A^{1/2}`, which keeps every square root symmetric.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, mut cov_a) = gaussian_fit(a)?;
    let (mu_b, mut cov_b) = gaussian_fit(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(CoreError::Validation("feature sets differ in dimension".into()));
    }
    if min_eigenvalue(&cov_a) < 1e-10 || min_eigenvalue(&cov_b) < 1e-10 {
        log::warn!("singular covariance in Fréchet distance; adding 1e-6 I to both fits");
        let eye = DMatrix::identity(mu_a.len(), mu_a.len()) * 1e-6;
        cov_a += &eye;
        cov_b += &eye;
    }
    let s = psd_sqrt(&cov_a);
    let cross = psd_sqrt(&(&s * &cov_b * &s)).trace();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Class prototypes: mean standardized feature per class label.
#[derive(Debug, Clone)]
pub struct RetrievalGallery {
    pub prototypes: BTreeMap<String, Vec<f64>>,
}

impl RetrievalGallery {
    pub fn build<'a>(items: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> Self {
        let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for (label, f) in items {
            let e = acc.entry(label.to_string()).or_insert_with(|| (vec![0.0; f.len()], 0));
            e.0.iter_mut().zip(f).for_each(|(a, v)| *a += v);
            e.1 += 1;
        }
        let prototypes = acc.into_iter().map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect())).collect();
        Self { prototypes }
    }
}

/// Retrieval precision at each `k` over shuffled 32-candidate pools.
///
/// A query counts as a hit at `k` when its true label ranks among the first
/// `k` candidates by distance to the class prototypes; ties keep the shuffled
/// order.
pub fn retrieval_precision(queries: &[(String, Vec<f64>)], gallery: &RetrievalGallery, ks: &[usize], seed: u64) -> Result<Vec<f64>> {
    if gallery.prototypes.len() < RETRIEVAL_POOL {
        return Err(CoreError::Config(format!("gallery has {} classes, the protocol needs {RETRIEVAL_POOL}", gallery.prototypes.len())));
    }
    if queries.is_empty() {
        return Err(CoreError::Validation("no retrieval queries".into()));
    }
    let labels: Vec<&String> = gallery.prototypes.keys().collect();
    let mut hits = vec![0usize; ks.len()];
    for (qi, (label, feat)) in queries.iter().enumerate() {
        if !gallery.prototypes.contains_key(label) {
            return Err(CoreError::Config(format!("gallery has no prototype for {label}")));
        }
        let mut rng = substream(seed, "retrieval", &[qi as u64]);
        let others: Vec<&String> = labels.iter().copied().filter(|l| *l != label).collect();
        let mut pool: Vec<&String> = others.choose_multiple(&mut rng, RETRIEVAL_POOL - 1).copied().collect();
        pool.push(label);
        pool.shuffle(&mut rng);
        let dists: Vec<f64> = pool.iter().map(|l| euclid(feat, &gallery.prototypes[*l])).collect();
        let pos = pool.iter().position(|l| *l == label).unwrap();
        let rank = (0..pool.len()).filter(|&i| dists[i] < dists[pos] || (dists[i] == dists[pos] && i < pos)).count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / queries.len() as f64).collect())
}

/// Mean distance over `n_pairs` index pairs drawn uniformly with replacement.
pub fn diversity(features: &[Vec<f64>], n_pairs: usize, seed: u64) -> Result<f64> {
    if features.is_empty() || n_pairs == 0 {
        return Err(CoreError::Validation("diversity needs features and at least one pair".into()));
    }
    let mut rng = substream(seed, "diversity", &[]);
    let n = features.len();
    let mut sum = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        sum += euclid(&features[i], &features[j]);
    }
    Ok(sum / n_pairs as f64)
}

/// Diversity within each group of repeated generations, averaged over groups.
pub fn multimodality(groups: &[Vec<Vec<f64>>], n_pairs: usize, seed: u64) -> Result<f64> {
    if groups.is_empty() {
        return Err(CoreError::Validation("no generation groups".into()));
    }
    let mut sum = 0.0;
    for (g, feats) in groups.iter().enumerate() {
        sum += diversity(feats, n_pairs, crate::rng::substream_seed(seed, "mmodality", &[g as u64]))?;
    }
    Ok(sum / groups.len() as f64)
}

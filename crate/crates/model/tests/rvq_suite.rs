//! Residual quantizer: resampling, nearest neighbour, index round trip and
//! dead-entry re-seeding.

mod common;

use common::randn;
use motionflow_core::rng::substream;
use motionflow_model::rvq::{pool, resample_temporal, schedule, Codebook, Quantizer, RvqConfig};
use proptest::prelude::*;

fn brute_nearest(entries: &[f64], d: usize, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..entries.len() / d {
        let mut s = 0.0;
        for c in 0..d {
            let diff = entries[k * d + c] - x[c];
            s += diff * diff;
        }
        if s < best_d {
            best_d = s;
            best = k;
        }
    }
    best
}

fn random_quantizer(seed: u64, size: usize, d: usize) -> Quantizer {
    let mut rng = substream(seed, "cb", &[]);
    Quantizer {
        config: RvqConfig { codebook_size: size, ..Default::default() },
        codebook: Codebook::from_entries(randn(&mut rng, size * d), d).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resample_to_same_length_is_identity(x in prop::collection::vec(-10.0f64..10.0, 1..60), d in 1usize..4) {
        let n = x.len() / d;
        prop_assume!(n > 0);
        let x = &x[..n * d];
        prop_assert_eq!(resample_temporal(x, d, n), x.to_vec());
    }

    #[test]
    fn nearest_matches_brute_force(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let q = random_quantizer(seed, 12, 4);
        prop_assert_eq!(q.codebook.nearest(&x), brute_nearest(&q.codebook.entries, 4, &x));
    }

    #[test]
    fn dequantize_round_trip_is_bitwise(seed in 0u64..1000, n in 1usize..33) {
        let d = 3;
        let q = random_quantizer(seed, 16, d);
        let mut rng = substream(seed, "z", &[n as u64]);
        let z = randn(&mut rng, n * d);
        let s = q.quantize_sequence(&z).unwrap();
        prop_assert_eq!(s.resolutions.clone(), schedule(n, &q.config.divisors));
        let back = q.dequantize(&s.indices, n).unwrap();
        prop_assert_eq!(&back, &s.z_q_hat);
        // Telescoping: quantized sum plus final residual is the input.
        for i in 0..n * d {
            prop_assert!((s.z_q_hat[i] + s.residual[i] - z[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn pooled_length_matches_target() {
    let x: Vec<f64> = (0..20).map(f64::from).collect();
    for h in 1..=10 {
        assert_eq!(pool(&x, 2, h).len(), 2 * h);
    }
}

/// Two Gaussian clusters and a codebook mostly far from the data, so most
/// entries see no data until re-seeded.
#[test]
fn reseeding_reduces_dead_entries_on_two_clusters() {
    let d = 2;
    let mut rng = substream(5, "toy", &[]);
    let mut points = Vec::new();
    for i in 0..400 {
        let c = if i % 2 == 0 { -4.0 } else { 4.0 };
        let p: Vec<f64> = randn(&mut rng, d).into_iter().map(|v| c + 0.5 * v).collect();
        points.push(p);
    }
    // Two entries sit in the clusters, the rest far away from any data.
    let start: Vec<f64> = (0..16).flat_map(|k| if k < 2 { [-4.0, -4.0 + 8.0 * k as f64] } else { [40.0 + k as f64, 40.0] }).collect();
    let mut q = Quantizer {
        config: RvqConfig { codebook_size: 16, divisors: vec![1], ..Default::default() },
        codebook: Codebook::from_entries(start, d).unwrap(),
    };
    let mut reseed_rng = substream(5, "reseed", &[]);
    let mut dead = Vec::new();
    for _ in 0..6 {
        let assignments: Vec<(usize, Vec<f64>)> = points.iter().map(|p| (q.codebook.nearest(p), p.clone())).collect();
        q.update(&assignments);
        dead.push(q.codebook.dead_entries());
        q.reseed_dead(&points, &mut reseed_rng);
    }
    assert!(dead.windows(2).all(|w| w[1] <= w[0]), "{dead:?}");
    assert!(dead[0] >= 12 && *dead.last().unwrap() < dead[0] / 2, "{dead:?}");
}

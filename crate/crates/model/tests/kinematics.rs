//! Reconstruction and kinematic losses against explicit loops.

mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use common::*;
use motionflow_core::rng::substream;
use motionflow_model::autoencoder::{Stage1Terms, Stage1Weights};
use motionflow_model::losses::{joint_sq_error, kinematic_terms, masked_mse};
use motionflow_model::nn::mask_tensor;

type Seq = Vec<Vec<Vec<f64>>>;

fn diff(x: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let mut x = x.to_vec();
    for _ in 0..k {
        x = x.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect();
    }
    x
}

/// Mean squared joint distance over windows of `k+1` valid frames.
fn loop_diff_loss(p: &Seq, t: &Seq, mask: &[Vec<bool>], k: usize, joints: std::ops::Range<usize>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..p.len() {
        let (dp, dt) = (diff(&p[b], k), diff(&t[b], k));
        for i in 0..dp.len() {
            if !(i..=i + k).all(|f| mask[b][f]) {
                continue;
            }
            for j in joints.clone() {
                sum += (0..3).map(|c| (dp[i][3 * j + c] - dt[i][3 * j + c]).powi(2)).sum::<f64>();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn case(seed: u64, lens: &[usize], frames: usize, joints: usize) -> (Tensor, Tensor, Tensor, Seq, Seq, Vec<Vec<bool>>) {
    let mut rng = substream(seed, "kin", &[]);
    let b = lens.len();
    let p = tensor(&mut rng, &[b, frames, 3 * joints]);
    let t = tensor(&mut rng, &[b, frames, 3 * joints]);
    let rows: Vec<Vec<bool>> = lens.iter().map(|&l| (0..frames).map(|f| f < l).collect()).collect();
    let m = mask_tensor(&rows, DType::F64, &Device::Cpu).unwrap();
    let (pv, tv) = (p.to_vec3::<f64>().unwrap(), t.to_vec3::<f64>().unwrap());
    (p, t, m, pv, tv, rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kinematic_terms_match_loops(seed in 0u64..10_000, l0 in 1usize..12, l1 in 1usize..12) {
        let joints = 3;
        let (p, t, m, pv, tv, rows) = case(seed, &[l0, l1], 12, joints);
        let terms = kinematic_terms(&p, &t, &m).unwrap();
        let close = |a: &Tensor, b: f64| (scalar(a) - b).abs() < 1e-9;
        prop_assert!(close(&terms.fk, loop_diff_loss(&pv, &tv, &rows, 0, 0..joints)));
        prop_assert!(close(&terms.vel, loop_diff_loss(&pv, &tv, &rows, 1, 0..joints)));
        prop_assert!(close(&terms.acc, loop_diff_loss(&pv, &tv, &rows, 2, 0..joints)));
        prop_assert!(close(&terms.jerk, loop_diff_loss(&pv, &tv, &rows, 3, 0..joints)));
        prop_assert!(close(&terms.global, loop_diff_loss(&pv, &tv, &rows, 0, 0..1)));
    }

    #[test]
    fn masked_mse_matches_loop(seed in 0u64..10_000, l0 in 1usize..9, l1 in 1usize..9) {
        let (p, t, m, pv, tv, rows) = case(seed, &[l0, l1], 9, 2);
        let (mut sum, mut n) = (0.0, 0usize);
        for b in 0..2 {
            for f in 0..9 {
                if rows[b][f] {
                    for c in 0..6 {
                        sum += (pv[b][f][c] - tv[b][f][c]).powi(2);
                        n += 1;
                    }
                }
            }
        }
        prop_assert!((scalar(&masked_mse(&p, &t, &m).unwrap()) - sum / n as f64).abs() < 1e-9);
        // Joint error sums over three coordinates: three times the channel mean.
        prop_assert!((scalar(&joint_sq_error(&p, &t, &m).unwrap()) - 3.0 * sum / n as f64).abs() < 1e-9);
    }
}

#[test]
fn padding_never_contributes() {
    let (p, t, m, _, _, _) = case(3, &[5, 8], 8, 2);
    let base = kinematic_terms(&p, &t, &m).unwrap();
    // Scramble the padded tail of the first row.
    let mut pv = p.to_vec3::<f64>().unwrap();
    for f in 5..8 {
        for c in pv[0][f].iter_mut() {
            *c = 1e6;
        }
    }
    let p2 = Tensor::from_vec(pv.concat().concat(), p.dims(), &Device::Cpu).unwrap();
    let again = kinematic_terms(&p2, &t, &m).unwrap();
    for (a, b) in
        [(&base.fk, &again.fk), (&base.vel, &again.vel), (&base.acc, &again.acc), (&base.jerk, &again.jerk), (&base.global, &again.global)]
    {
        assert_eq!(scalar(a), scalar(b));
    }
}

#[test]
fn too_short_sequences_give_zero_difference_losses() {
    let (p, t, m, _, _, _) = case(4, &[2, 1], 4, 1);
    let terms = kinematic_terms(&p, &t, &m).unwrap();
    assert_eq!(scalar(&terms.acc), 0.0);
    assert_eq!(scalar(&terms.jerk), 0.0);
    assert!(scalar(&terms.vel) > 0.0);
}

#[test]
fn composite_is_linear_in_weights() {
    let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
    let terms = Stage1Terms { rec: s(0.7), commit: s(0.2), fk: s(1.3), kl: s(40.0), dis: s(2.1) };
    let w1 = Stage1Weights { rec: 1.0, commit: 0.02, fk: 0.5, kl: 1e-4, dis: 0.1 };
    let w2 = Stage1Weights { rec: 0.3, commit: 1.0, fk: 0.0, kl: 2.0, dis: 0.7 };
    let dot = |w: &Stage1Weights| 0.7 * w.rec + 0.2 * w.commit + 1.3 * w.fk + 40.0 * w.kl + 2.1 * w.dis;
    for w in [w1, w2] {
        assert!((scalar(&terms.composite(&w).unwrap()) - dot(&w)).abs() < 1e-12);
    }
    let sum =
        Stage1Weights { rec: w1.rec + w2.rec, commit: w1.commit + w2.commit, fk: w1.fk + w2.fk, kl: w1.kl + w2.kl, dis: w1.dis + w2.dis };
    let lhs = scalar(&terms.composite(&sum).unwrap());
    let rhs = scalar(&terms.composite(&w1).unwrap()) + scalar(&terms.composite(&w2).unwrap());
    assert!((lhs - rhs).abs() < 1e-12);
}

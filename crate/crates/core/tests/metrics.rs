use motionflow_core::dataset::{generate, GenerationSpec, Split};
use motionflow_core::metrics::{
    diversity, frechet_distance, joint_position_error, kinematic_features, retrieval_precision, FeatureStandardizer, RetrievalGallery,
    FEATURE_DIM, RETRIEVAL_POOL,
};
use motionflow_core::rng::substream;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Matrix square root by coupled Newton–Schulz iteration on a scaled input.
fn newton_schulz_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.norm();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut y = a / norm;
    let mut z = eye.clone();
    for _ in 0..200 {
        let t = (&eye * 3.0 - &z * &y) * 0.5;
        y = &y * &t;
        z = &t * &z;
    }
    y * norm.sqrt()
}

fn cov(set: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = vec![0.0; d];
    for v in set {
        for k in 0..d {
            mu[k] += v[k] / n;
        }
    }
    let mut c = DMatrix::zeros(d, d);
    for v in set {
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] += (v[i] - mu[i]) * (v[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    (mu, c)
}

#[test]
fn frechet_matches_newton_schulz_oracle() {
    let mut rng = substream(3, "fid-oracle", &[]);
    for trial in 0..10 {
        let d = 2 + trial % 4;
        let sample = |rng: &mut motionflow_core::rng::Rng, shift: f64, scale: f64| -> Vec<Vec<f64>> {
            (0..40)
                .map(|_| {
                    (0..d)
                        .map(|k| {
                            let e: f64 = StandardNormal.sample(rng);
                            shift + scale * (1.0 + k as f64 * 0.3) * e
                        })
                        .collect::<Vec<f64>>()
                })
                .collect()
        };
        let a = sample(&mut rng, 0.0, 1.0);
        let b = sample(&mut rng, 0.7, 1.5);
        let (ma, ca) = cov(&a);
        let (mb, cb) = cov(&b);
        let root = newton_schulz_sqrt(&(&ca * &cb));
        let diff: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        let expect = diff + ca.trace() + cb.trace() - 2.0 * root.trace();
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-6, "trial {trial}: {got} vs {expect}");
        let sym = frechet_distance(&b, &a).unwrap();
        assert!((got - sym).abs() < 1e-8);
    }
}

#[test]
fn joint_error_matches_loop_oracle() {
    let mut rng = substream(8, "mpjpe", &[]);
    let (t, j) = (13, 9);
    let a: Vec<f32> = (0..t * j * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..t * j * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..t).map(|i| i % 3 != 0).collect();
    let mut sum = 0.0;
    let mut n = 0.0;
    for f in 0..t {
        if !mask[f] {
            continue;
        }
        for k in 0..j {
            let mut d2 = 0.0;
            for c in 0..3 {
                let i = (f * j + k) * 3 + c;
                d2 += (a[i] as f64 - b[i] as f64).powi(2);
            }
            sum += d2.sqrt();
            n += 1.0;
        }
    }
    assert!((joint_position_error(&a, &b, j, &mask).unwrap() - sum / n).abs() < 1e-9);
}

#[test]
fn diversity_matches_loop_oracle() {
    let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
    let mut rng = substream(21, "diversity", &[]);
    let mut sum = 0.0;
    for _ in 0..300 {
        let i = rng.random_range(0..20);
        let j = rng.random_range(0..20);
        sum += ((feats[i][0] - feats[j][0]).powi(2) + (feats[i][1] - feats[j][1]).powi(2)).sqrt();
    }
    assert!((diversity(&feats, 300, 21).unwrap() - sum / 300.0).abs() < 1e-12);
    let same = vec![vec![1.0, 2.0]; 7];
    assert_eq!(diversity(&same, 50, 2).unwrap(), 0.0);
}

fn class_features(split: Split, ds: &motionflow_core::dataset::Dataset) -> Vec<(String, Vec<f64>)> {
    ds.split(split)
        .map(|(e, m)| (e.class_label.clone(), kinematic_features(m.frames(), m.num_joints(), m.fps as f64, m.valid_mask()).unwrap()))
        .collect()
}

#[test]
fn ground_truth_self_retrieval() {
    let ds = generate(&GenerationSpec::balanced(12), 17).unwrap();
    let train = class_features(Split::Train, &ds);
    assert!(train.iter().all(|(_, f)| f.len() == FEATURE_DIM));
    let std = FeatureStandardizer::fit(&train.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>()).unwrap();
    let train_std: Vec<(String, Vec<f64>)> = train.iter().map(|(l, f)| (l.clone(), std.apply(f))).collect();
    let gallery = RetrievalGallery::build(train_std.iter().map(|(l, f)| (l.as_str(), f.as_slice())));
    let test: Vec<(String, Vec<f64>)> = class_features(Split::Test, &ds).into_iter().map(|(l, f)| (l, std.apply(&f))).collect();
    let queries = if test.is_empty() { train_std.clone() } else { test };
    let r = retrieval_precision(&queries, &gallery, &[1, 3, RETRIEVAL_POOL], 5).unwrap();
    assert!(r[1] >= 0.95, "self-retrieval R@3 = {r:?}");
    assert_eq!(r[2], 1.0);
}

#[test]
fn random_noise_retrieval_is_at_chance() {
    let ds = generate(&GenerationSpec::balanced(4), 2).unwrap();
    let train = class_features(Split::Train, &ds);
    let std = FeatureStandardizer::fit(&train.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>()).unwrap();
    let gallery = RetrievalGallery::build(
        train
            .iter()
            .map(|(l, f)| (l.clone(), std.apply(f)))
            .collect::<Vec<_>>()
            .iter()
            .map(|(l, f)| (l.as_str(), f.as_slice()))
            .collect::<Vec<_>>(),
    );
    let labels: Vec<String> = gallery.prototypes.keys().cloned().collect();
    let mut rng = substream(4, "noise-motions", &[]);
    // Random-walk joint positions: structureless motions with a random true label.
    let n = 2000;
    let queries: Vec<(String, Vec<f64>)> = (0..n)
        .map(|i| {
            let t = 60;
            let mut frames = vec![0f32; t * 27];
            for v in frames.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let f = kinematic_features(&frames, 9, 20.0, &vec![true; t]).unwrap();
            (labels[i % labels.len()].clone(), std.apply(&f))
        })
        .collect();
    let r1 = retrieval_precision(&queries, &gallery, &[1], 9).unwrap()[0];
    // All noise motions share one nearest prototype, so a hit happens exactly
    // when the query's label is that prototype and it is in the pool; the rate
    // stays near 1/32 and well inside a binomial band.
    let p = 1.0 / RETRIEVAL_POOL as f64;
    let band = 4.0 * (p * (1.0 - p) / n as f64).sqrt() + 1.0 / labels.len() as f64;
    assert!((r1 - p).abs() <= band, "R@1 {r1}");
}

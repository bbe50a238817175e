use motionflow_core::oracle::{
    bayes_risk, check_monotonicity, gaussian_irreducible_variance, log_log_slope, monte_carlo_bound_check, run_certificate, EndpointModel,
    FiniteJointDistribution, Representation, T_GRID,
};
use motionflow_core::rng::substream;
use rand::seq::SliceRandom;

#[test]
fn monotonicity_on_random_distributions() {
    let mut rng = substream(1, "prop-c1", &[]);
    for _ in 0..1000 {
        let d = FiniteJointDistribution::random(&mut rng, 12, 2, 3, 3);
        assert!(check_monotonicity(&d).unwrap().holds);
    }
}

#[test]
fn risk_is_independent_of_support_order() {
    let mut rng = substream(2, "order", &[]);
    for _ in 0..50 {
        let d = FiniteJointDistribution::random(&mut rng, 15, 3, 4, 2);
        let mut idx: Vec<usize> = (0..15).collect();
        idx.shuffle(&mut rng);
        let shuffled =
            FiniteJointDistribution::new(idx.iter().map(|&i| d.support[i].clone()).collect(), idx.iter().map(|&i| d.probs[i]).collect());
        // Reordered probabilities may sum differently in the last bit.
        let Ok(shuffled) = shuffled else { continue };
        for rep in [Representation::S1, Representation::S2, Representation::Joint] {
            assert_eq!(bayes_risk(&d, rep).unwrap(), bayes_risk(&shuffled, rep).unwrap());
        }
    }
}

#[test]
fn closed_form_grid_has_no_violations_and_is_monotone_in_sigma() {
    for &t in &T_GRID {
        let mut prev = (0.0, 0.0);
        for i in 0..=30 {
            let s = i as f64 * 0.1;
            let (exact, bound) = gaussian_irreducible_variance(s, t).unwrap();
            assert!(exact <= bound + 1e-12, "sigma {s} t {t}");
            assert!(exact >= prev.0 - 1e-12 && bound >= prev.1);
            prev = (exact, bound);
        }
    }
}

#[test]
fn monte_carlo_passes_and_scales() {
    let model = EndpointModel::bimodal(1.0, 0.3);
    let rep = monte_carlo_bound_check(&model, 2, &[0.2, 0.5, 0.8], 100_000, 7).unwrap();
    assert!(rep.all_pass(), "{rep:?}");
    let half = monte_carlo_bound_check(&model, 2, &[0.5], 50_000, 7).unwrap();
    let full = monte_carlo_bound_check(&model, 2, &[0.5], 100_000, 7).unwrap();
    let ratio = full.points[0].std_error / half.points[0].std_error;
    assert!((ratio - 0.5f64.sqrt()).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn coupled_endpoint_has_tighter_bound_and_slope_minus_two() {
    let coupled = EndpointModel::unimodal(0.3);
    let single = EndpointModel::bimodal(1.0, 0.3);
    for &t in &T_GRID {
        assert!(coupled.bound(4, t) < single.bound(4, t));
    }
    let x: Vec<f64> = T_GRID.iter().map(|t| 1.0 - t).collect();
    let y: Vec<f64> = T_GRID.iter().map(|&t| single.bound(1, t)).collect();
    assert!((log_log_slope(&x, &y) + 2.0).abs() <= 0.1);
}

#[test]
fn certificate_passes() {
    let c = run_certificate(5, 20_000).unwrap();
    assert!(c.all_passed(), "{c:#?}");
}

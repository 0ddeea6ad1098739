use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use mdpreg::basis::Standardizer;
use mdpreg::data::metrics;
use mdpreg::model::{init_state, Hyperparameters};
use mdpreg::numstat::{log_mvgamma, log_sum_exp, seeded_rng, SpdMatrix};
use mdpreg::predictive::predictive_mixture;
use mdpreg::priorcheck::{conflict_pvalues, empirical_quantile, weak_informativity_zeta};
use mdpreg::regadjust::knn_search;
use mdpreg::vsugs::{urn_weights, OnlineFitter, TauRateMode};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

fn spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded_rng(seed);
    let b = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    &b * b.transpose() + DMatrix::identity(n, n) * 0.1
}

/// A state after `n` online steps on random data.
fn online_state(n: usize, t: usize, seed: u64) -> (Hyperparameters, OnlineFitter) {
    let mut rng = seeded_rng(seed);
    let h = Hyperparameters::with_defaults(2, 2, t, 1.5);
    let mut f = OnlineFitter::new(h.clone(), init_state(&h).unwrap(), TauRateMode::Accumulate);
    for _ in 0..n {
        let e = DVector::from_vec(vec![1.0, rng.random(), rng.random()]);
        let y = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        f.step(&y, &e).unwrap();
    }
    (h, f)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn rank_one_update_matches_refactorization(n in 1usize..6, c in 0.01f64..10.0, seed in any::<u64>()) {
        let a = spd(n, seed);
        let mut rng = seeded_rng(seed ^ 1);
        let v = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
        let updated = SpdMatrix::new(a.clone()).unwrap().rank_one_update(&v, c).unwrap();
        let direct = SpdMatrix::new(&a + &v * v.transpose() * c).unwrap();
        prop_assert!((updated.values() - direct.values()).amax() < 1e-9 * (1.0 + direct.values().amax()));
        prop_assert!((updated.log_det() - direct.log_det()).abs() < 1e-9 * (1.0 + direct.log_det().abs()));
    }

    #[test]
    fn urn_weights_form_a_distribution(t in 1usize..8, seen in 0usize..40, alpha in 0.05f64..20.0, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let mut masses = vec![0.0; t];
        for _ in 0..seen {
            masses[rng.random_range(0..t.min(seen))] += 1.0;
        }
        let w = urn_weights(&masses, seen, alpha);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_bounds(xs in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = log_sum_exp(&xs);
        prop_assert!(lse >= max - 1e-12);
        prop_assert!(lse <= max + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn log_mvgamma_recursion(m in 2usize..6, offset in 0.01f64..20.0) {
        let x = (m as f64 - 1.0) / 2.0 + offset;
        let lhs = log_mvgamma(m, x).unwrap() - log_mvgamma(m - 1, x).unwrap();
        let rhs = (m as f64 - 1.0) / 2.0 * std::f64::consts::PI.ln()
            + statrs::function::gamma::ln_gamma(x + (1.0 - m as f64) / 2.0);
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn online_steps_keep_invariants(n in 0usize..30, t in 1usize..5, seed in any::<u64>()) {
        let (h, f) = online_state(n, t, seed);
        let s = f.state();
        prop_assert_eq!(s.sigma.dof, h.sigma_prior.dof + n as f64);
        prop_assert_eq!(s.tau.shape, h.tau_prior.shape + n as f64);
        prop_assert!((s.masses().iter().sum::<f64>() - n as f64).abs() < 1e-9);
        prop_assert!(s.masses().iter().all(|m| *m >= 0.0));
    }

    #[test]
    fn predictive_quantiles_invert_cdf(n in 1usize..25, x1 in 0.0f64..1.0, u in 0.001f64..0.999, seed in any::<u64>()) {
        let (h, f) = online_state(n, 3, seed);
        let e0 = DVector::from_vec(vec![1.0, x1, 1.0 - x1]);
        let mix = predictive_mixture(&e0, f.state(), &h).unwrap();
        prop_assert!((mix.weights.sum() - 1.0).abs() < 1e-12);
        for l in 0..2 {
            let q = mix.marginal_quantile(l, u).unwrap();
            prop_assert!((mix.marginal_cdf(l, q).unwrap() - u).abs() < 1e-8);
            prop_assert!(mix.marginal_cdf(l, q + 0.1).unwrap() >= mix.marginal_cdf(l, q).unwrap());
        }
    }

    #[test]
    fn standardized_columns_are_centred(rows in 2usize..30, cols in 1usize..4, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let x = DMatrix::from_fn(rows, cols, |_, _| 3.0 + 2.0 * rng.sample::<f64, _>(StandardNormal));
        let s = Standardizer::fit(&x).unwrap();
        let z = s.apply_rows(&x).unwrap();
        for c in 0..cols {
            prop_assert!(z.column(c).mean().abs() < 1e-10);
        }
    }

    #[test]
    fn knn_is_sorted_and_distinct(n in 1usize..60, k in 1usize..60, seed in any::<u64>()) {
        let k = k.min(n);
        let mut rng = seeded_rng(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let q = DVector::from_vec(vec![rng.random(), rng.random()]);
        let nb = knn_search(&q, &x, k).unwrap();
        prop_assert_eq!(nb.indices.len(), k);
        prop_assert!(nb.distances.windows(2).all(|w| w[0] <= w[1]));
        let mut idx = nb.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), k);
        let farthest = nb.distances[k - 1];
        let closer = (0..n).filter(|i| (x.row(*i).transpose() - &q).norm() < farthest - 1e-12).count();
        prop_assert!(closer < k);
    }

    #[test]
    fn pvalues_and_zeta_are_bounded(shift in -3.0f64..3.0, gamma in 0.01f64..0.5, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let sample = DMatrix::from_fn(80, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let base = DMatrix::from_fn(60, 1, |_, _| shift + rng.sample::<f64, _>(StandardNormal));
        let p = conflict_pvalues(&sample, &base).unwrap();
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let q = empirical_quantile(&p, gamma).unwrap();
        prop_assert!(p.iter().any(|v| *v == q));
        // A zero baseline quantile leaves zeta undefined.
        prop_assert_eq!(weak_informativity_zeta(&p, &p, gamma).is_err(), q == 0.0);
        if q > 0.0 {
            let z = weak_informativity_zeta(&p, &p, gamma).unwrap();
            prop_assert!((0.0..=1.0).contains(&z));
            let other: Vec<f64> = p.iter().map(|v| (v * 1.5).min(1.0)).collect();
            let z = weak_informativity_zeta(&p, &other, gamma).unwrap();
            prop_assert!((0.0..=1.0).contains(&z));
        }
    }

    #[test]
    fn metrics_are_nonnegative_and_zero_on_truth(rows in 1usize..20, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let truth = DMatrix::from_fn(rows, 2, |_, _| 1.0 + rng.random::<f64>());
        let noisy = truth.map(|v| v + 0.1);
        let m = metrics(&truth, &truth).unwrap();
        prop_assert!(m.rmse.iter().all(|v| *v == 0.0));
        let m = metrics(&truth, &noisy).unwrap();
        prop_assert!(m.rmse.iter().all(|v| (*v - 0.1).abs() < 1e-12));
        prop_assert!(m.mape.iter().all(|v| *v > 0.0));
    }
}

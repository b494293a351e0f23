//! Property tests over the numerical invariants that must hold for arbitrary
//! well-formed inputs.

use nalgebra::DVector;
use proptest::prelude::*;

use regression_markets::allocation::normalize_to_simplex;
use regression_markets::bayes::{self, LossTracker, ModelConfig};
use regression_markets::dataset::{build_lags, generate_confounded, ReplicateEntry, SyntheticSpec};

proptest! {
    #[test]
    fn simplex_normalization_is_a_distribution_or_zero(
        values in proptest::collection::vec(-10.0f64..10.0, 1..12)
    ) {
        let normalized = normalize_to_simplex(&values);
        prop_assert_eq!(normalized.len(), values.len());
        prop_assert!(normalized.iter().all(|v| *v >= 0.0));
        let total: f64 = normalized.iter().sum();
        prop_assert!(total == 0.0 || (total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn tracker_is_a_convex_combination(
        init in -5.0f64..5.0,
        tau in 0.01f64..1.0,
        losses in proptest::collection::vec(-5.0f64..5.0, 1..64)
    ) {
        let mut tracker = LossTracker::with_initial(init, tau);
        let mut lo = init;
        let mut hi = init;
        for &loss in &losses {
            lo = lo.min(loss);
            hi = hi.max(loss);
            tracker.observe(loss).unwrap();
            let v = tracker.value().unwrap();
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }

    #[test]
    fn predictive_variance_never_drops_below_noise_floor(
        beta in 0.1f64..10.0,
        alpha in 0.1f64..10.0,
        tau in 0.5f64..1.0,
        stream in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 1..40)
    ) {
        let config = ModelConfig {
            prior_precision: alpha,
            noise_precision: beta,
            forgetting: tau,
            include_intercept: false,
        };
        let mut posterior = bayes::init_posterior(&config, 2).unwrap();
        for &(x1, x2, y) in &stream {
            let x = DVector::from_vec(vec![x1, x2]);
            let pred = bayes::predict(&posterior, &x, &config).unwrap();
            prop_assert!(pred.variance >= 1.0 / beta - 1e-12);
            posterior = bayes::update(&posterior, &x, y, &config).unwrap();
        }
    }

    #[test]
    fn lags_drop_exactly_lag_rows_and_preserve_ownership(
        lag in 0usize..20,
        t in 21usize..120,
        seed in 0u64..50
    ) {
        let spec = SyntheticSpec {
            confounder_strength: 1.0,
            true_weights: vec![0.4, 0.6],
            noise_std: 0.2,
            replicate_plan: vec![ReplicateEntry { feature: 0, count: 1, noise_std: 0.1 }],
            length: t,
        };
        let data = generate_confounded(&spec, seed).unwrap();
        let lagged = build_lags(&data, lag).unwrap();
        prop_assert_eq!(lagged.rows(), t - lag);
        lagged.validate().unwrap();
        if lag > 0 {
            // features shifted: row 0 of the lagged data is row 0 of the old
            // features against row `lag` of the old target
            prop_assert_eq!(lagged.features()[(0, 0)], data.features()[(0, 0)]);
            prop_assert_eq!(lagged.target()[0], data.target()[lag]);
        }
    }

    #[test]
    fn synthetic_generation_is_reproducible_and_valid(
        seed in 0u64..100,
        d in 1usize..5,
        k in 0usize..4
    ) {
        let spec = SyntheticSpec {
            confounder_strength: 0.9,
            true_weights: vec![0.5; d],
            noise_std: 0.15,
            replicate_plan: if k > 0 {
                vec![ReplicateEntry { feature: 0, count: k, noise_std: 0.05 }]
            } else {
                vec![]
            },
            length: 50,
        };
        let a = generate_confounded(&spec, seed).unwrap();
        let b = generate_confounded(&spec, seed).unwrap();
        prop_assert_eq!(a.features(), b.features());
        prop_assert_eq!(a.target(), b.target());
        a.validate().unwrap();
        prop_assert_eq!(a.num_support(), d + k);
    }
}

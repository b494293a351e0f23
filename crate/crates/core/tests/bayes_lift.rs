//! Consistency and cross-validation checks for the regression and lift
//! modules against independent oracles.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use regression_markets::bayes::{
    self, LossTracker, ModelConfig, PosteriorState, PredictiveDistribution, ScoringRule,
};
use regression_markets::dataset::{generate_confounded, SyntheticSpec};
use regression_markets::lift::{
    closed_form_quadratic_score, fit_feature_model, Backend, Coalition, Conditioning,
    FeatureModel, LiftEvaluator, LiftSpec,
};

#[test]
fn conjugacy_precision_growth() {
    // With tau = 1 the posterior precision grows by exactly beta * x x^T per
    // observation.
    let config = ModelConfig {
        prior_precision: 0.7,
        noise_precision: 2.3,
        forgetting: 1.0,
        include_intercept: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let dim = 4;
    let mut posterior = bayes::init_posterior(&config, dim).unwrap();
    let mut expected = DMatrix::<f64>::identity(dim, dim) * config.prior_precision;
    for _ in 0..50 {
        let x = DVector::from_fn(dim, |_, _| normal.sample(&mut rng));
        let y = normal.sample(&mut rng);
        posterior = bayes::update(&posterior, &x, y, &config).unwrap();
        expected += &x * x.transpose() * config.noise_precision;
        let gap = (posterior.precision() - &expected).abs().max();
        assert!(gap <= 1e-10, "conjugacy gap {gap}");
    }
}

#[test]
fn forgetting_posterior_tracks_true_weights_within_three_std() {
    // Stationary stream, well-specified noise precision: the posterior mean
    // lands within three posterior standard deviations of the generator.
    let noise_std = 0.3;
    let spec = SyntheticSpec {
        confounder_strength: 1.0,
        true_weights: vec![0.6, -0.4, 0.2],
        noise_std,
        replicate_plan: vec![],
        length: 3000,
    };
    let data = generate_confounded(&spec, 21).unwrap();
    let config = ModelConfig {
        prior_precision: 1.0,
        noise_precision: 1.0 / (noise_std * noise_std),
        forgetting: 0.999,
        include_intercept: false,
    };
    let mut posterior = bayes::init_posterior(&config, 3).unwrap();
    for t in 0..data.rows() {
        posterior = bayes::update(&posterior, &data.row(t), data.target()[t], &config).unwrap();
    }
    let cov = posterior.covariance().unwrap();
    for i in 0..3 {
        let std = cov[(i, i)].sqrt();
        let gap = (posterior.mean()[i] - spec.true_weights[i]).abs();
        assert!(
            gap <= 3.0 * std,
            "weight {i}: gap {gap} exceeds 3 std {std}"
        );
    }
}

#[test]
fn nlpd_propriety_spot_check() {
    // The true predictive distribution minimizes the expected NLPD; a
    // mean-shifted predictor must score worse on average.
    let (m, v): (f64, f64) = (0.4, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let normal = Normal::new(m, v.sqrt()).unwrap();
    let truth = PredictiveDistribution {
        mean: m,
        variance: v,
    };
    let shifted = PredictiveDistribution {
        mean: m + 0.5,
        variance: v,
    };
    let n = 100_000;
    let mut loss_true = 0.0;
    let mut loss_shifted = 0.0;
    for _ in 0..n {
        let y = normal.sample(&mut rng);
        loss_true += bayes::score(&truth, y, ScoringRule::NegativeLogPredictiveDensity);
        loss_shifted += bayes::score(&shifted, y, ScoringRule::NegativeLogPredictiveDensity);
    }
    assert!(
        loss_true < loss_shifted,
        "propriety violated: {loss_true} !< {loss_shifted}"
    );
}

#[test]
fn tracker_stays_inside_observed_envelope() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut tracker = LossTracker::with_initial(0.5, 0.9);
    let mut lo = 0.5f64;
    let mut hi = 0.5f64;
    for _ in 0..500 {
        let loss = rand::Rng::random_range(&mut rng, -2.0..5.0);
        lo = lo.min(loss);
        hi = hi.max(loss);
        tracker.observe(loss).unwrap();
        let v = tracker.value().unwrap();
        assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
    }
}

#[test]
fn observational_equals_interventional_for_diagonal_covariance() {
    let post = PosteriorState::from_point_weights(None, &[0.8, -0.4, 0.25, 0.1], 1e9).unwrap();
    let fm = FeatureModel::from_moments(
        DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
        DMatrix::from_fn(4, 4, |i, j| if i == j { 0.5 + i as f64 * 0.3 } else { 0.0 }),
    )
    .unwrap();
    let x = DVector::from_vec(vec![0.5, -0.1, 0.7, 0.2]);
    for mask in 0..16u64 {
        let coalition = Coalition::from_mask(mask, &[0, 1, 2, 3]);
        let obs =
            closed_form_quadratic_score(&post, &fm, 0, &coalition, &x, 0.3, Conditioning::Observational)
                .unwrap();
        let int =
            closed_form_quadratic_score(&post, &fm, 0, &coalition, &x, 0.3, Conditioning::Interventional)
                .unwrap();
        assert!((obs - int).abs() <= 1e-10, "mask {mask}: {obs} vs {int}");
    }
}

#[test]
fn monte_carlo_error_shrinks_with_sample_count() {
    // ~1/sqrt(n): sixteen times the samples should give roughly a quarter of
    // the error; assert the median ratio over seeds is below one half.
    let post = PosteriorState::from_point_weights(None, &[0.7, -0.5, 0.3], 1e9).unwrap();
    let a = DMatrix::from_vec(3, 3, vec![1.0, 0.4, 0.1, 0.4, 0.9, 0.3, 0.1, 0.3, 1.1]);
    let cov = &a * a.transpose();
    let fm = FeatureModel::from_moments(DVector::zeros(3), cov).unwrap();
    let x = DVector::from_vec(vec![0.5, -0.2, 0.8]);
    let coalition = Coalition::new([0]);
    let exact =
        closed_form_quadratic_score(&post, &fm, 0, &coalition, &x, 0.9, Conditioning::Observational)
            .unwrap();
    let eval_mc = |samples: usize, seed: u64| {
        let spec = LiftSpec {
            conditioning: Conditioning::Observational,
            backend: Backend::MonteCarlo,
            mc_samples: samples,
            rule: ScoringRule::SquaredError,
        };
        let ev = LiftEvaluator::new(spec, &post, &fm, 0).unwrap();
        (ev.eval(&coalition, &x, 0.9, seed).unwrap() - exact).abs()
    };
    let mut ratios: Vec<f64> = (0..15)
        .map(|seed| eval_mc(16_000, seed) / eval_mc(1_000, seed).max(1e-12))
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(
        ratios[7] < 0.5,
        "median error ratio {} not consistent with 1/sqrt(n)",
        ratios[7]
    );
}

#[test]
fn fitted_moments_match_population_for_independent_and_confounded_columns() {
    // Independent columns: off-diagonals shrink like 1/sqrt(T). Confounded
    // pair: correlation approaches c^2 / (c^2 + noise variance).
    let t = 4000;
    let c = 0.9f64;
    let sigma = 0.4f64;
    let spec = SyntheticSpec {
        confounder_strength: c,
        true_weights: vec![0.5, 0.5],
        noise_std: sigma,
        replicate_plan: vec![],
        length: t,
    };
    let data = generate_confounded(&spec, 77).unwrap();
    let fm = fit_feature_model(&data, 0..t).unwrap();
    let var0 = fm.covariance()[(0, 0)];
    let var1 = fm.covariance()[(1, 1)];
    let corr = fm.covariance()[(0, 1)] / (var0 * var1).sqrt();
    let expected = c * c / (c * c + sigma * sigma);
    assert!(
        (corr - expected).abs() <= 4.0 / (t as f64).sqrt() + 0.02,
        "confounded correlation {corr} vs population {expected}"
    );

    // independent columns via zero confounder loading
    let spec_ind = SyntheticSpec {
        confounder_strength: 0.0,
        ..spec
    };
    let data_ind = generate_confounded(&spec_ind, 78).unwrap();
    let fm_ind = fit_feature_model(&data_ind, 0..t).unwrap();
    let v0 = fm_ind.covariance()[(0, 0)];
    let v1 = fm_ind.covariance()[(1, 1)];
    let off = fm_ind.covariance()[(0, 1)] / (v0 * v1).sqrt();
    assert!(
        off.abs() <= 4.0 / (t as f64).sqrt(),
        "independent columns correlate: {off}"
    );
}

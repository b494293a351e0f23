//! Allocation methods versus independent enumeration oracles, plus the
//! Robust-Shapley penalty behavior and the confounded zero-weight
//! decomposition example.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regression_markets::allocation::{
    banzhaf, decompose_effects, robust_shapley, shapley_exact, Similarity, TabulatedGame,
};
use regression_markets::dataset::{AgentId, MarketData};
use regression_markets::lift::{Conditioning, FeatureModel, LiftSpec};
use regression_markets::bayes::PosteriorState;

fn random_game(d: usize, seed: u64) -> (TabulatedGame, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Vec<f64> = (0..1usize << d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (
        TabulatedGame::new((0..d).collect(), table.clone()).unwrap(),
        table,
    )
}

#[test]
fn four_player_shapley_matches_permutation_oracle() {
    for seed in 0..8 {
        let (game, table) = random_game(4, seed);
        let result = shapley_exact(&game).unwrap();
        let oracle = common::shapley_permutation_oracle(4, &|set| {
            table[set.iter().map(|&i| 1usize << i).sum::<usize>()]
        });
        for (i, (value, reference)) in result.values.iter().zip(&oracle).enumerate() {
            assert!(
                (value - reference).abs() <= 1e-12,
                "seed {seed}, player {i}: {value} vs {reference}"
            );
        }
    }
}

#[test]
fn four_player_banzhaf_matches_subset_oracle() {
    for seed in 0..8 {
        let (game, table) = random_game(4, seed + 100);
        let result = banzhaf(&game).unwrap();
        let oracle = common::banzhaf_subset_oracle(4, &|set| {
            table[set.iter().map(|&i| 1usize << i).sum::<usize>()]
        });
        for (i, (value, reference)) in result.values.iter().zip(&oracle).enumerate() {
            assert!(
                (value - reference).abs() <= 1e-12,
                "seed {seed}, player {i}: {value} vs {reference}"
            );
        }
    }
}

fn three_column_data(cols: [Vec<f64>; 3]) -> MarketData {
    let t = cols[0].len();
    MarketData::new(
        (0..t).map(|i| i.to_string()).collect(),
        vec![0.0; t],
        DMatrix::from_fn(t, 3, |i, j| cols[j][i]),
        vec!["x1".into(), "x2".into(), "x3".into()],
        AgentId::new("central"),
        0,
        vec![
            (AgentId::new("a1"), vec![0]),
            (AgentId::new("a2"), vec![1]),
            (AgentId::new("a3"), vec![2]),
        ],
    )
    .unwrap()
}

#[test]
fn robust_shapley_penalties() {
    let base: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
    let orthogonal: Vec<f64> = (0..40)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * (1.0 + (i as f64 * 0.11).cos()))
        .collect();
    let data = three_column_data([base.clone(), base.clone(), orthogonal]);
    let (game, _) = random_game(3, 55);

    // gamma = 0: identical to exact Shapley
    let plain = shapley_exact(&game).unwrap();
    let robust0 = robust_shapley(&game, &data, 0.0, Similarity::Pearson).unwrap();
    assert_eq!(plain.values, robust0.values);
    assert_eq!(plain.normalized, robust0.normalized);

    // gamma > 0: the duplicated pair is penalized below its Shapley value and
    // total allocated shares drop below one
    let robust = robust_shapley(&game, &data, 1.0, Similarity::Pearson).unwrap();
    for i in 0..2 {
        if plain.values[i] > 0.0 {
            assert!(
                robust.values[i] < plain.values[i],
                "duplicate column {i} not penalized"
            );
        }
    }
    let share_sum: f64 = robust.normalized.iter().sum();
    let plain_sum: f64 = plain.normalized.iter().sum();
    assert!(share_sum < plain_sum, "budget-balance loss not observed");
}

#[test]
fn robust_shapley_orthogonal_features_unpenalized() {
    // Columns with zero pairwise correlation keep their Shapley values.
    let t = 64;
    let c1: Vec<f64> = (0..t).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let c2: Vec<f64> = (0..t).map(|i| if i % 4 < 2 { 1.0 } else { -1.0 }).collect();
    let c3: Vec<f64> = (0..t).map(|i| if i % 8 < 4 { 1.0 } else { -1.0 }).collect();
    let data = three_column_data([c1, c2, c3]);
    let (game, _) = random_game(3, 56);
    let plain = shapley_exact(&game).unwrap();
    let robust = robust_shapley(&game, &data, 2.5, Similarity::Pearson).unwrap();
    for i in 0..3 {
        assert!(
            (robust.values[i] - plain.values[i]).abs() <= 1e-12,
            "orthogonal feature {i} was penalized"
        );
    }
}

#[test]
fn confounded_zero_weight_feature_has_positive_total_but_zero_direct_effect() {
    // Two features driven by one confounder; the model reads only the first.
    // Observationally the second still earns through the backdoor path, but
    // its direct effect vanishes.
    let c: f64 = 1.0;
    let sigma: f64 = 0.1;
    let var = c * c + sigma * sigma;
    let cov = DMatrix::from_vec(2, 2, vec![var, c * c, c * c, var]);
    let fm = FeatureModel::from_moments(DVector::zeros(2), cov).unwrap();
    let posterior = PosteriorState::from_point_weights(None, &[0.8, 0.0], 1e9).unwrap();
    let spec = LiftSpec::closed_form(Conditioning::Observational);

    let x = DVector::from_vec(vec![0.9, 0.85]);
    let y = 0.1;
    // permutation (2, 1): feature  2 enters first, prefix empty
    let decomposition = decompose_effects(&spec, &posterior, &fm, 0, &[1, 0], 1, &x, y).unwrap();
    assert!(
        decomposition.total > 1e-3,
        "observational total effect should be positive, got {}",
        decomposition.total
    );
    assert!(
        decomposition.direct.abs() <= 1e-12,
        "direct effect of a zero-weight feature must vanish, got {}",
        decomposition.direct
    );
    assert!((decomposition.total - decomposition.indirect).abs() <= 1e-12);
}

#[test]
fn grand_and_empty_values_anchor_normalization() {
    let (game, table) = random_game(5, 77);
    let result = shapley_exact(&game).unwrap();
    let improvement = table[0] - table[31];
    let total: f64 = result.values.iter().sum();
    assert!((total - improvement).abs() <= 1e-12);
    let norm_sum: f64 = result.normalized.iter().sum();
    assert!(norm_sum == 0.0 || (norm_sum - 1.0).abs() <= 1e-9);
}

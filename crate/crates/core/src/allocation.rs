//! Semivalue computation over coalition games: exact and sampled Shapley
//! values, the Banzhaf value, the similarity-penalized Robust-Shapley variant,
//! the direct/indirect effect decomposition of an observational marginal
//! contribution, and collinearity diagnostics.
//!
//! Orientation convention: scores are negatively oriented, so the marginal
//! contribution of player `i` to coalition `w` is `value(w) - value(w + i)` —
//! an improvement is positive.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::PosteriorState;
use crate::dataset::MarketData;
use crate::error::{Error, Result};
use crate::lift::{
    expected_squared_error, jittered_covariance, Coalition, FeatureModel, LiftEvaluator, LiftSpec,
};
use crate::stats;

/// Exact enumeration guard: beyond this many players use the sampled variant.
pub const EXACT_PLAYER_GUARD: usize = 20;

/// A coalition game over an ordered list of players (support feature indices).
/// Coalitions are bitmasks over player positions. Implementations must be
/// deterministic for a fixed seed.
pub trait Game: Sync {
    fn players(&self) -> &[usize];
    fn value(&self, mask: u64) -> f64;

    fn player_count(&self) -> usize {
        self.players().len()
    }

    fn grand_mask(&self) -> u64 {
        if self.player_count() == 64 {
            u64::MAX
        } else {
            (1u64 << self.player_count()) - 1
        }
    }
}

/// Game with all `2^D` coalition values precomputed.
#[derive(Clone, Debug)]
pub struct TabulatedGame {
    players: Vec<usize>,
    values: Vec<f64>,
}

impl TabulatedGame {
    pub fn new(players: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if players.len() > EXACT_PLAYER_GUARD {
            return Err(Error::TooManyPlayers {
                players: players.len(),
                guard: EXACT_PLAYER_GUARD,
            });
        }
        if values.len() != 1usize << players.len() {
            return Err(Error::DimensionMismatch {
                expected: 1usize << players.len(),
                found: values.len(),
            });
        }
        Ok(Self { players, values })
    }

    pub fn from_fn(players: Vec<usize>, mut f: impl FnMut(u64) -> Result<f64>) -> Result<Self> {
        if players.len() > EXACT_PLAYER_GUARD {
            return Err(Error::TooManyPlayers {
                players: players.len(),
                guard: EXACT_PLAYER_GUARD,
            });
        }
        let values = (0..1u64 << players.len())
            .map(&mut f)
            .collect::<Result<Vec<f64>>>()?;
        Self::new(players, values)
    }
}

impl Game for TabulatedGame {
    fn players(&self) -> &[usize] {
        &self.players
    }

    fn value(&self, mask: u64) -> f64 {
        self.values[mask as usize]
    }
}

/// A game backed by a lift evaluator at one observation.
pub struct LiftGame<'a> {
    evaluator: &'a LiftEvaluator<'a>,
    players: Vec<usize>,
    x: DVector<f64>,
    y: f64,
    seed: u64,
}

impl<'a> LiftGame<'a> {
    pub fn new(
        evaluator: &'a LiftEvaluator<'a>,
        players: Vec<usize>,
        x: DVector<f64>,
        y: f64,
        seed: u64,
    ) -> Self {
        Self {
            evaluator,
            players,
            x,
            y,
            seed,
        }
    }
}

impl Game for LiftGame<'_> {
    fn players(&self) -> &[usize] {
        &self.players
    }

    fn value(&self, mask: u64) -> f64 {
        let coalition = Coalition::from_mask(mask, &self.players);
        // Distinct sub-seed per coalition so Monte Carlo draws do not collide.
        let seed = self.seed ^ mask.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.evaluator
            .eval(&coalition, &self.x, self.y, seed)
            .expect("lift evaluation failed inside game oracle")
    }
}

/// Solution concept identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ShapleyExact,
    ShapleySampled,
    Banzhaf,
    RobustShapley,
}

/// Per-feature semivalues plus the normalization used for revenue shares.
#[derive(Clone, Debug)]
pub struct AllocationResult {
    /// Player list in game order (support feature indices).
    pub players: Vec<usize>,
    /// Raw semivalues, improvement-positive.
    pub values: Vec<f64>,
    /// Nonnegative revenue shares. For Shapley methods these sum to one
    /// (or zero when no value is positive); Robust-Shapley shares sum to at
    /// most one; Banzhaf shares are measured against the total improvement and
    /// need not sum to one.
    pub normalized: Vec<f64>,
    pub method: Method,
    pub permutations_used: Option<usize>,
    /// Per-player standard errors of the sampled estimate.
    pub std_errors: Option<Vec<f64>>,
}

impl AllocationResult {
    pub fn value_of(&self, feature: usize) -> Option<f64> {
        self.players
            .iter()
            .position(|&p| p == feature)
            .map(|i| self.values[i])
    }

    pub fn normalized_of(&self, feature: usize) -> Option<f64> {
        self.players
            .iter()
            .position(|&p| p == feature)
            .map(|i| self.normalized[i])
    }
}

/// Floor negatives at zero and renormalize to the simplex; all-nonpositive
/// vectors map to all zeros.
pub fn normalize_to_simplex(values: &[f64]) -> Vec<f64> {
    let positive: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = positive.iter().sum();
    if total > 0.0 {
        positive.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; values.len()]
    }
}

fn guard_players(d: usize) -> Result<()> {
    if d > EXACT_PLAYER_GUARD {
        return Err(Error::TooManyPlayers {
            players: d,
            guard: EXACT_PLAYER_GUARD,
        });
    }
    Ok(())
}

fn tabulate<G: Game>(game: &G) -> Vec<f64> {
    (0..1u64 << game.player_count())
        .map(|m| game.value(m))
        .collect()
}

/// Exact Shapley values by enumeration of all `2^D` coalitions:
/// `phi_i = (1/D) sum_{w not containing i} C(D-1, |w|)^-1 (v(w) - v(w + i))`.
pub fn shapley_exact<G: Game>(game: &G) -> Result<AllocationResult> {
    let d = game.player_count();
    guard_players(d)?;
    let values = tabulate(game);
    let phi = shapley_from_table(&values, d);
    Ok(AllocationResult {
        players: game.players().to_vec(),
        normalized: normalize_to_simplex(&phi),
        values: phi,
        method: Method::ShapleyExact,
        permutations_used: None,
        std_errors: None,
    })
}

fn shapley_from_table(values: &[f64], d: usize) -> Vec<f64> {
    if d == 0 {
        return Vec::new();
    }
    // weight[s] = 1 / (D * C(D-1, s)) for a coalition of size s
    let mut weight = vec![0.0; d];
    let mut binom = 1.0;
    for (s, w) in weight.iter_mut().enumerate() {
        *w = 1.0 / (d as f64 * binom);
        binom = binom * (d - 1 - s) as f64 / (s + 1) as f64;
    }
    let mut phi = vec![0.0; d];
    for mask in 0..values.len() as u64 {
        let size = mask.count_ones() as usize;
        for i in 0..d {
            if mask >> i & 1 == 0 {
                phi[i] += weight[size] * (values[mask as usize] - values[(mask | 1 << i) as usize]);
            }
        }
    }
    phi
}

/// Options for the permutation-sampling estimator.
#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub permutations: usize,
    pub seed: u64,
    /// Evaluate permutations in antithetic pairs (a permutation and its
    /// reverse) to reduce variance.
    pub antithetic: bool,
}

/// Uniform permutation sampling of Shapley values with per-player standard
/// errors; deterministic for a fixed seed regardless of thread count.
pub fn shapley_sampled<G: Game>(
    game: &G,
    permutations: usize,
    seed: u64,
) -> Result<AllocationResult> {
    shapley_sampled_with_options(
        game,
        SampleOptions {
            permutations,
            seed,
            antithetic: false,
        },
    )
}

pub fn shapley_sampled_with_options<G: Game>(
    game: &G,
    options: SampleOptions,
) -> Result<AllocationResult> {
    let d = game.player_count();
    if options.permutations == 0 {
        return Err(Error::InvalidParameter(
            "permutation count must be at least 1".into(),
        ));
    }
    if d == 0 {
        return Ok(AllocationResult {
            players: Vec::new(),
            values: Vec::new(),
            normalized: Vec::new(),
            method: Method::ShapleySampled,
            permutations_used: Some(0),
            std_errors: Some(Vec::new()),
        });
    }
    if d > 63 {
        return Err(Error::TooManyPlayers {
            players: d,
            guard: 63,
        });
    }

    // With antithetic pairing the independent sampling unit is the pair, so
    // draw half as many base permutations and average each with its reverse.
    let units = if options.antithetic {
        options.permutations.div_ceil(2)
    } else {
        options.permutations
    };
    let deltas: Vec<Vec<f64>> = (0..units)
        .into_par_iter()
        .map(|p| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(options.seed ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(&mut rng);
            let forward = permutation_deltas(game, &order);
            if options.antithetic {
                let reversed: Vec<usize> = order.iter().rev().copied().collect();
                let backward = permutation_deltas(game, &reversed);
                forward
                    .iter()
                    .zip(&backward)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect()
            } else {
                forward
            }
        })
        .collect();

    let n = deltas.len() as f64;
    let mut phi = vec![0.0; d];
    for sample in &deltas {
        for (acc, v) in phi.iter_mut().zip(sample) {
            *acc += v;
        }
    }
    for v in &mut phi {
        *v /= n;
    }
    let mut std_errors = vec![0.0; d];
    if deltas.len() > 1 {
        for i in 0..d {
            let var = deltas
                .iter()
                .map(|s| (s[i] - phi[i]) * (s[i] - phi[i]))
                .sum::<f64>()
                / (n - 1.0);
            std_errors[i] = (var / n).sqrt();
        }
    }
    let evaluated = if options.antithetic { units * 2 } else { units };
    Ok(AllocationResult {
        players: game.players().to_vec(),
        normalized: normalize_to_simplex(&phi),
        values: phi,
        method: Method::ShapleySampled,
        permutations_used: Some(evaluated),
        std_errors: Some(std_errors),
    })
}

/// Average the prefix marginal contributions over an explicit permutation set.
/// Feeding every permutation of the player set reproduces the exact values.
pub fn shapley_with_permutations<G: Game>(
    game: &G,
    permutations: &[Vec<usize>],
) -> Result<AllocationResult> {
    let d = game.player_count();
    if permutations.is_empty() {
        return Err(Error::InvalidParameter("no permutations supplied".into()));
    }
    let mut phi = vec![0.0; d];
    for order in permutations {
        if order.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: order.len(),
            });
        }
        for (i, delta) in permutation_deltas(game, order).into_iter().enumerate() {
            phi[i] += delta;
        }
    }
    for v in &mut phi {
        *v /= permutations.len() as f64;
    }
    Ok(AllocationResult {
        players: game.players().to_vec(),
        normalized: normalize_to_simplex(&phi),
        values: phi,
        method: Method::ShapleySampled,
        permutations_used: Some(permutations.len()),
        std_errors: None,
    })
}

/// Marginal contribution of every player along one permutation, indexed by
/// player position (not permutation position).
fn permutation_deltas<G: Game>(game: &G, order: &[usize]) -> Vec<f64> {
    let mut deltas = vec![0.0; order.len()];
    let mut mask = 0u64;
    let mut before = game.value(0);
    for &player in order {
        let next = mask | 1 << player;
        let after = game.value(next);
        deltas[player] = before - after;
        mask = next;
        before = after;
    }
    deltas
}

/// Banzhaf value: `phi_i = 2^-(D-1) sum_{w not containing i} (v(w) - v(w + i))`.
///
/// Efficiency is not asserted; the normalized shares measure each value
/// against the total improvement `v(empty) - v(grand)` rather than against the
/// sum of values, which keeps replicated (null) players from inflating the
/// shares of their owner.
pub fn banzhaf<G: Game>(game: &G) -> Result<AllocationResult> {
    let d = game.player_count();
    guard_players(d)?;
    let values = tabulate(game);
    let mut phi = vec![0.0; d];
    if d > 0 {
        let scale = 1.0 / (1u64 << (d - 1)) as f64;
        for mask in 0..values.len() as u64 {
            for i in 0..d {
                if mask >> i & 1 == 0 {
                    phi[i] += scale * (values[mask as usize] - values[(mask | 1 << i) as usize]);
                }
            }
        }
    }
    let improvement = if values.is_empty() {
        0.0
    } else {
        values[0] - values[values.len() - 1]
    };
    let normalized = if improvement > 0.0 {
        phi.iter().map(|v| v.max(0.0) / improvement).collect()
    } else {
        vec![0.0; d]
    };
    Ok(AllocationResult {
        players: game.players().to_vec(),
        values: phi,
        normalized,
        method: Method::Banzhaf,
        permutations_used: None,
        std_errors: None,
    })
}

/// Similarity measure for the Robust-Shapley penalty; both are taken in
/// absolute value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Cosine,
    Pearson,
}

fn similarity(sim: Similarity, a: &[f64], b: &[f64]) -> f64 {
    match sim {
        Similarity::Cosine => stats::cosine(a, b).abs(),
        Similarity::Pearson => stats::pearson(a, b).abs(),
    }
}

/// Robust-Shapley: each exact Shapley value is damped by
/// `exp(-gamma * sum_{j != i} sim(x_i, x_j))`. Similar features are penalized
/// whether replicated or naturally correlated, so allocated shares sum to less
/// than one and budget balance is deliberately given up.
///
/// Self-similarity is excluded from the sum; including it would only scale
/// every value by the constant `exp(-gamma)`.
pub fn robust_shapley<G: Game>(
    game: &G,
    data: &MarketData,
    gamma: f64,
    sim: Similarity,
) -> Result<AllocationResult> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gamma must be a finite nonnegative real, got {gamma}"
        )));
    }
    let base = shapley_exact(game)?;
    let penalties = robust_penalties(game.players(), data, gamma, sim)?;
    let values: Vec<f64> = base
        .values
        .iter()
        .zip(&penalties)
        .map(|(v, p)| v * p)
        .collect();
    let normalized: Vec<f64> = base
        .normalized
        .iter()
        .zip(&penalties)
        .map(|(v, p)| v * p)
        .collect();
    Ok(AllocationResult {
        players: base.players,
        values,
        normalized,
        method: Method::RobustShapley,
        permutations_used: None,
        std_errors: None,
    })
}

/// The multiplicative penalties used by [`robust_shapley`], one per player.
pub fn robust_penalties(
    players: &[usize],
    data: &MarketData,
    gamma: f64,
    sim: Similarity,
) -> Result<Vec<f64>> {
    let columns: Vec<Vec<f64>> = players
        .iter()
        .map(|&p| {
            if p >= data.num_features() {
                return Err(Error::InvalidParameter(format!(
                    "player column {p} outside the data ({} features)",
                    data.num_features()
                )));
            }
            Ok(data.column(p))
        })
        .collect::<Result<_>>()?;
    Ok((0..players.len())
        .map(|i| {
            let total: f64 = (0..players.len())
                .filter(|&j| j != i)
                .map(|j| similarity(sim, &columns[i], &columns[j]))
                .sum();
            (-gamma * total).exp()
        })
        .collect())
}

/// The three-bracket decomposition of an observational marginal contribution
/// for one feature in one permutation: the total effect splits into a direct
/// part (the feature enters the model while the out-of-coalition law stays
/// frozen at the prefix conditional) and an indirect part (the law shifts from
/// conditioning on the prefix to conditioning on the prefix plus the feature).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectDecomposition {
    pub total: f64,
    pub direct: f64,
    pub indirect: f64,
}

/// Compute the decomposition with the closed-form Gaussian backend. The lift
/// spec must name that backend and the squared-error rule; anything else is an
/// unsupported-backend error because the three integrals have to be exactly
/// evaluable.
#[allow(clippy::too_many_arguments)]
pub fn decompose_effects(
    spec: &LiftSpec,
    posterior: &PosteriorState,
    fm: &FeatureModel,
    num_central: usize,
    permutation: &[usize],
    feature: usize,
    x: &DVector<f64>,
    y: f64,
) -> Result<EffectDecomposition> {
    if spec.backend != crate::lift::Backend::ClosedFormGaussian {
        return Err(Error::UnsupportedBackend(
            "effect decomposition requires the closed-form Gaussian backend".into(),
        ));
    }
    spec.validate()?;
    let position = permutation
        .iter()
        .position(|&p| p == feature)
        .ok_or_else(|| {
            Error::InvalidParameter(format!("feature {feature} not in the permutation"))
        })?;

    let mut prefix: Vec<usize> = (0..num_central).collect();
    prefix.extend(&permutation[..position]);
    let mut prefix_and_i = prefix.clone();
    prefix_and_i.push(feature);

    let w0 = posterior.intercept_weight();
    let weights = posterior.feature_weights();
    let cov = jittered_covariance(fm);

    // xi_obs(prefix): out block (suffix + i) conditioned on the prefix
    let a = expected_squared_error(w0, &weights, fm.mean(), &cov, &prefix, &prefix, x, y)?;
    // feature enters the model, conditioning law frozen at the prefix
    let b = expected_squared_error(w0, &weights, fm.mean(), &cov, &prefix_and_i, &prefix, x, y)?;
    // xi_obs(prefix + i): conditioning law includes the feature
    let c = expected_squared_error(
        w0,
        &weights,
        fm.mean(),
        &cov,
        &prefix_and_i,
        &prefix_and_i,
        x,
        y,
    )?;

    Ok(EffectDecomposition {
        total: a - c,
        direct: a - b,
        indirect: b - c,
    })
}

/// Collinearity and allocation-dispersion diagnostics.
#[derive(Clone, Debug)]
pub struct ShapleyDiagnostics {
    /// Variance inflation factor per feature column, from the inverse Gram
    /// matrix of unit-norm columns; `+inf` sentinel when the Gram matrix is
    /// singular.
    pub kappa: Vec<f64>,
    /// Closed-form variance of the per-feature value
    /// `2 var(w_i) (2 E[w_i]^2 + var(w_i)) var(X_i)^2`.
    pub phi_variance: Vec<f64>,
    /// Noncentrality `E[w_i]^2 / var(w_i)` of the scaled noncentral
    /// chi-squared law of the value.
    pub noncentrality: Vec<f64>,
    /// Variance-decomposition approximation `E[phi_i] ~ E[w_i]^2 var(X_i)`.
    pub expected_phi: Vec<f64>,
}

/// Compute diagnostics over a design window. The Gram matrix is formed from
/// columns scaled to unit Euclidean norm, so an orthonormal design gives
/// `kappa = 1` exactly and increasing collinearity drives it to infinity.
pub fn diagnostics(
    posterior: &PosteriorState,
    fm: &FeatureModel,
    data: &MarketData,
    window: std::ops::Range<usize>,
) -> Result<ShapleyDiagnostics> {
    if window.start >= window.end || window.end > data.rows() {
        return Err(Error::Window(format!(
            "diagnostics window {}..{} invalid for {} rows",
            window.start,
            window.end,
            data.rows()
        )));
    }
    let p = data.num_features();
    if posterior.feature_dimension() != p || fm.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: posterior.feature_dimension(),
        });
    }
    let n = window.end - window.start;
    let design = DMatrix::from_fn(n, p, |i, j| data.features()[(window.start + i, j)]);
    let kappa = vif_from_design(&design);

    let post_cov = posterior.covariance()?;
    let skip = usize::from(posterior.has_intercept());
    let weights = posterior.feature_weights();
    let mut phi_variance = Vec::with_capacity(p);
    let mut noncentrality = Vec::with_capacity(p);
    let mut expected_phi = Vec::with_capacity(p);
    for i in 0..p {
        let m = weights[i];
        let var_w = post_cov[(skip + i, skip + i)];
        let var_x = fm.covariance()[(i, i)];
        phi_variance.push(2.0 * var_w * (2.0 * m * m + var_w) * var_x * var_x);
        noncentrality.push(if var_w > 0.0 { m * m / var_w } else { f64::INFINITY });
        expected_phi.push(m * m * var_x);
    }
    Ok(ShapleyDiagnostics {
        kappa,
        phi_variance,
        noncentrality,
        expected_phi,
    })
}

/// Variance inflation factors from the Gram matrix of unit-norm columns; the
/// singular case reports the infinite sentinel for every column rather than
/// failing.
fn vif_from_design(design: &DMatrix<f64>) -> Vec<f64> {
    let p = design.ncols();
    let mut scaled = design.clone();
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let gram = scaled.transpose() * &scaled;
    match Cholesky::new(gram) {
        Some(chol) => (0..p)
            .map(|i| {
                let e = DVector::from_fn(p, |k, _| if k == i { 1.0 } else { 0.0 });
                chol.solve(&e)[i]
            })
            .collect(),
        None => vec![f64::INFINITY; p],
    }
}

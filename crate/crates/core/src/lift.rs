//! Coalition value functions: score a model on a partial feature set by
//! averaging the out-of-coalition features under a chosen law.
//!
//! Two conditionings are supported. The *observational* lift integrates the
//! missing features under their Gaussian conditional given the observed
//! in-coalition (and central) values, so backdoor correlations leak credit to
//! features the model never reads. The *interventional* lift integrates under
//! the joint marginal of the missing features; in the model-input system this
//! is exactly the do-intervention, and only direct algebraic dependence of the
//! model on a feature is rewarded.
//!
//! Backends: a closed-form Gaussian backend for the squared-error rule (the
//! expectation of a quadratic under a Gaussian), and a Monte Carlo backend
//! (conditional sampling for the observational lift, background-row mixing for
//! the interventional one).

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bayes::{PosteriorState, ScoringRule};
use crate::dataset::MarketData;
use crate::error::{Error, Result};

/// Relative diagonal jitter applied to the feature covariance before any Schur
/// conditioning; replicated features make the covariance exactly singular.
const JITTER_REL: f64 = 1e-8;

/// A coalition of support feature indices. Central features are implicitly
/// always part of the conditioning set and never members.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Coalition {
    members: BTreeSet<usize>,
}

impl Coalition {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(members: impl IntoIterator<Item = usize>) -> Self {
        Self {
            members: members.into_iter().collect(),
        }
    }

    /// Decode a bitmask over an ordered player list.
    pub fn from_mask(mask: u64, players: &[usize]) -> Self {
        Self {
            members: players
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask >> bit & 1 == 1)
                .map(|(_, &p)| p)
                .collect(),
        }
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.members.contains(&idx)
    }

    pub fn insert(&mut self, idx: usize) {
        self.members.insert(idx);
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }
}

impl FromIterator<usize> for Coalition {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::new(iter)
    }
}

/// Gaussian model of the joint feature law plus background rows for the Monte
/// Carlo backend.
#[derive(Clone, Debug)]
pub struct FeatureModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// Rows drawn from the training stream; may be empty for moments-only
    /// models, in which case the Monte Carlo interventional backend is
    /// unavailable.
    background: DMatrix<f64>,
}

impl FeatureModel {
    pub fn from_moments(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != covariance.ncols() || covariance.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature model moments".into()));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-9 * (1.0 + covariance.abs().max()) {
            return Err(Error::InvalidParameter(
                "feature covariance is not symmetric".into(),
            ));
        }
        Ok(Self {
            mean,
            covariance,
            background: DMatrix::zeros(0, 0),
        })
    }

    pub fn with_background(mut self, background: DMatrix<f64>) -> Result<Self> {
        if background.nrows() > 0 && background.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: background.ncols(),
            });
        }
        self.background = background;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn background(&self) -> &DMatrix<f64> {
        &self.background
    }

    /// Keep at most `n` background rows, sampled without replacement.
    pub fn subsample_background(&mut self, n: usize, seed: u64) {
        let rows = self.background.nrows();
        if rows <= n {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..rows).collect();
        // partial Fisher-Yates
        for i in 0..n {
            let j = i + (rand::Rng::random_range(&mut rng, 0..(rows - i) as u64)) as usize;
            indices.swap(i, j);
        }
        indices.truncate(n);
        indices.sort_unstable();
        let cols = self.background.ncols();
        self.background = DMatrix::from_fn(n, cols, |i, j| self.background[(indices[i], j)]);
    }
}

/// Empirical mean/covariance over a training window; the window rows become
/// the Monte Carlo background.
pub fn fit_feature_model(data: &MarketData, window: Range<usize>) -> Result<FeatureModel> {
    if window.end > data.rows() || window.start >= window.end {
        return Err(Error::Window(format!(
            "window {}..{} invalid for {} rows",
            window.start,
            window.end,
            data.rows()
        )));
    }
    let n = window.end - window.start;
    if n < 2 {
        return Err(Error::Window("feature-model window needs at least 2 rows".into()));
    }
    let p = data.num_features();
    let rows = DMatrix::from_fn(n, p, |i, j| data.features()[(window.start + i, j)]);
    let mean = DVector::from_fn(p, |j, _| rows.column(j).sum() / n as f64);
    let mut cov = DMatrix::zeros(p, p);
    for r in 0..n {
        for a in 0..p {
            let da = rows[(r, a)] - mean[a];
            for b in a..p {
                cov[(a, b)] += da * (rows[(r, b)] - mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    FeatureModel::from_moments(mean, cov)?.with_background(rows)
}

/// Which law to integrate the out-of-coalition features under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    Observational,
    Interventional,
}

/// Estimator backend for lift evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[serde(alias = "closed-form")]
    ClosedFormGaussian,
    MonteCarlo,
}

/// A coalition value function: scoring rule, conditioning semantics, and
/// estimator backend.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftSpec {
    pub conditioning: Conditioning,
    pub backend: Backend,
    pub mc_samples: usize,
    pub rule: ScoringRule,
}

impl LiftSpec {
    pub fn closed_form(conditioning: Conditioning) -> Self {
        Self {
            conditioning,
            backend: Backend::ClosedFormGaussian,
            mc_samples: 1000,
            rule: ScoringRule::SquaredError,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend == Backend::MonteCarlo && self.mc_samples == 0 {
            return Err(Error::InvalidParameter(
                "mc_samples must be at least 1 for the Monte Carlo backend".into(),
            ));
        }
        if self.backend == Backend::ClosedFormGaussian
            && self.rule != ScoringRule::SquaredError
        {
            return Err(Error::UnsupportedBackend(
                "the closed-form Gaussian backend supports the squared-error rule only".into(),
            ));
        }
        Ok(())
    }
}

/// Cholesky with escalating diagonal jitter; conditioning on replicated
/// columns is exactly degenerate without it.
fn spd_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let scale = (m.trace() / n as f64).abs().max(1e-12);
    let mut jitter = JITTER_REL * scale;
    for _ in 0..8 {
        let jittered = m + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite(
        "conditional covariance block".into(),
    ))
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Per-coalition closed-form machinery, reusable across time steps and
/// posterior updates: the Schur pieces depend only on the coalition and the
/// feature model, so one plan serves every `(weights, x, y)` evaluation.
#[derive(Clone, Debug)]
pub struct CoalitionPlan {
    fixed: Vec<usize>,
    out: Vec<usize>,
    /// Conditioning indices and the regression matrix `A = Sigma_oc Sigma_cc^-1`
    /// of the out block on them; `None` for the marginal law.
    regression: Option<(Vec<usize>, DMatrix<f64>)>,
    /// Conditional (or marginal) covariance of the out block.
    cov_out: DMatrix<f64>,
    mu_out: DVector<f64>,
    cond_mean: DVector<f64>,
}

impl CoalitionPlan {
    /// Exact `E[(w0 + w . x~ - y)^2]` with the plan's fixed coordinates taken
    /// from `x` and the out block following the plan's Gaussian law.
    pub fn expected_squared_error(
        &self,
        w0: f64,
        weights: &DVector<f64>,
        x: &DVector<f64>,
        y: f64,
    ) -> f64 {
        let mut pred = w0;
        for &i in &self.fixed {
            pred += weights[i] * x[i];
        }
        if self.out.is_empty() {
            let m = pred - y;
            return m * m;
        }
        let w_o = subvector(weights, &self.out);
        let mut mean_out = self.mu_out.clone();
        if let Some((cond, a)) = &self.regression {
            let delta = DVector::from_fn(cond.len(), |k, _| x[cond[k]] - self.cond_mean[k]);
            mean_out += a * delta;
        }
        pred += w_o.dot(&mean_out);
        let m = pred - y;
        m * m + (&self.cov_out * &w_o).dot(&w_o)
    }
}

/// Evaluator binding a lift spec to a posterior and feature model for a given
/// market shape (`num_central` leading central columns). Evaluation is pure;
/// Monte Carlo calls take an explicit seed.
pub struct LiftEvaluator<'a> {
    spec: LiftSpec,
    posterior: &'a PosteriorState,
    fm: &'a FeatureModel,
    num_central: usize,
    cov_jittered: DMatrix<f64>,
    /// Posterior covariance, materialized lazily for the NLPD rule.
    posterior_cov: Option<DMatrix<f64>>,
    /// Noise variance `1/beta` added to the predictive variance under the
    /// NLPD rule; set from the model config via [`with_noise_variance`](Self::with_noise_variance).
    nlpd_noise_var: f64,
}

impl<'a> LiftEvaluator<'a> {
    pub fn new(
        spec: LiftSpec,
        posterior: &'a PosteriorState,
        fm: &'a FeatureModel,
        num_central: usize,
    ) -> Result<Self> {
        spec.validate()?;
        if posterior.feature_dimension() != fm.dim() {
            return Err(Error::DimensionMismatch {
                expected: fm.dim(),
                found: posterior.feature_dimension(),
            });
        }
        if num_central > fm.dim() {
            return Err(Error::InvalidParameter(format!(
                "num_central {num_central} exceeds feature count {}",
                fm.dim()
            )));
        }
        let n = fm.dim();
        let jitter = JITTER_REL * (fm.covariance().trace() / n.max(1) as f64).abs().max(1e-12);
        let cov_jittered = fm.covariance() + DMatrix::<f64>::identity(n, n) * jitter;
        let posterior_cov = if spec.rule == ScoringRule::NegativeLogPredictiveDensity {
            Some(posterior.covariance()?)
        } else {
            None
        };
        Ok(Self {
            spec,
            posterior,
            fm,
            num_central,
            cov_jittered,
            posterior_cov,
            nlpd_noise_var: 1.0,
        })
    }

    pub fn with_noise_variance(mut self, variance: f64) -> Self {
        self.nlpd_noise_var = variance;
        self
    }

    pub fn spec(&self) -> &LiftSpec {
        &self.spec
    }

    pub fn num_central(&self) -> usize {
        self.num_central
    }

    fn fixed_indices(&self, coalition: &Coalition) -> Result<Vec<usize>> {
        let n = self.fm.dim();
        let mut fixed: Vec<usize> = (0..self.num_central).collect();
        for idx in coalition.members() {
            if idx < self.num_central || idx >= n {
                return Err(Error::InvalidParameter(format!(
                    "coalition member {idx} outside the support range {}..{n}",
                    self.num_central
                )));
            }
            fixed.push(idx);
        }
        Ok(fixed)
    }

    /// The lift value at one observation. `seed` drives the Monte Carlo
    /// backend and is ignored by the closed form.
    pub fn eval(&self, coalition: &Coalition, x: &DVector<f64>, y: f64, seed: u64) -> Result<f64> {
        self.eval_with_se(coalition, x, y, seed).map(|(v, _)| v)
    }

    /// As [`eval`](Self::eval), additionally returning the Monte Carlo
    /// standard error (`None` for exact evaluations).
    pub fn eval_with_se(
        &self,
        coalition: &Coalition,
        x: &DVector<f64>,
        y: f64,
        seed: u64,
    ) -> Result<(f64, Option<f64>)> {
        if x.len() != self.fm.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.fm.dim(),
                found: x.len(),
            });
        }
        let fixed = self.fixed_indices(coalition)?;
        // Grand coalition: nothing to integrate, both backends and both
        // conditionings coincide with the plain score.
        if fixed.len() == self.fm.dim() {
            return Ok((self.plain_score(x, y)?, None));
        }
        match self.spec.backend {
            Backend::ClosedFormGaussian => {
                let conditioning: &[usize] = match self.spec.conditioning {
                    Conditioning::Observational => &fixed,
                    Conditioning::Interventional => &[],
                };
                let value = expected_squared_error(
                    self.posterior.intercept_weight(),
                    &self.posterior.feature_weights(),
                    self.fm.mean(),
                    &self.cov_jittered,
                    &fixed,
                    conditioning,
                    x,
                    y,
                )?;
                Ok((value, None))
            }
            Backend::MonteCarlo => self.monte_carlo(&fixed, x, y, seed),
        }
    }

    /// Precompute the Schur pieces of one coalition for repeated closed-form
    /// evaluation across time steps and posterior updates (squared-error rule
    /// only).
    pub fn plan(&self, coalition: &Coalition) -> Result<CoalitionPlan> {
        if self.spec.rule != ScoringRule::SquaredError {
            return Err(Error::UnsupportedBackend(
                "coalition plans require the squared-error rule".into(),
            ));
        }
        let fixed = self.fixed_indices(coalition)?;
        let conditioning: &[usize] = match self.spec.conditioning {
            Conditioning::Observational => &fixed,
            Conditioning::Interventional => &[],
        };
        coalition_plan(self.fm.mean(), &self.cov_jittered, &fixed, conditioning)
    }

    fn plain_score(&self, x: &DVector<f64>, y: f64) -> Result<f64> {
        let w = self.posterior.feature_weights();
        let mean = self.posterior.intercept_weight() + w.dot(x);
        match self.spec.rule {
            ScoringRule::SquaredError => Ok((mean - y) * (mean - y)),
            ScoringRule::NegativeLogPredictiveDensity => Ok(self.nlpd_at(x, y)),
        }
    }

    fn nlpd_at(&self, x: &DVector<f64>, y: f64) -> f64 {
        let cov = self
            .posterior_cov
            .as_ref()
            .expect("posterior covariance materialized for NLPD");
        let skip = usize::from(self.posterior.has_intercept());
        let dim = self.posterior.dimension();
        let phi = DVector::from_fn(dim, |i, _| {
            if skip == 1 && i == 0 {
                1.0
            } else {
                x[i - skip]
            }
        });
        let mean = self.posterior.mean().dot(&phi);
        let posterior_term = (cov * &phi).dot(&phi);
        let v = self.nlpd_noise_var + posterior_term;
        0.5 * (2.0 * std::f64::consts::PI * v).ln() + (y - mean) * (y - mean) / (2.0 * v)
    }

    fn monte_carlo(
        &self,
        fixed: &[usize],
        x: &DVector<f64>,
        y: f64,
        seed: u64,
    ) -> Result<(f64, Option<f64>)> {
        let n = self.fm.dim();
        let out: Vec<usize> = (0..n).filter(|i| !fixed.contains(i)).collect();
        let samples = self.spec.mc_samples;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw_buf = DVector::zeros(n);
        draw_buf.copy_from(x);

        let mut scores = Vec::with_capacity(samples);
        match self.spec.conditioning {
            Conditioning::Interventional => {
                // Average over background rows with the in-coalition values
                // overwritten by the observed ones.
                let bg = self.fm.background();
                if bg.nrows() == 0 {
                    return Err(Error::UnsupportedBackend(
                        "Monte Carlo interventional lift needs background rows".into(),
                    ));
                }
                for _ in 0..samples {
                    let r = rand::Rng::random_range(&mut rng, 0..bg.nrows() as u64) as usize;
                    for &j in &out {
                        draw_buf[j] = bg[(r, j)];
                    }
                    scores.push(self.sample_score(&draw_buf, y));
                }
            }
            Conditioning::Observational => {
                // Sample the out-block from its Gaussian conditional.
                let cond = conditional_gaussian(self.fm.mean(), &self.cov_jittered, &out, fixed, x)?;
                let chol = spd_cholesky(&cond.cov)?;
                let l = chol.l();
                for _ in 0..samples {
                    let z = DVector::from_fn(out.len(), |_, _| {
                        StandardNormal.sample(&mut rng)
                    });
                    let draw = &cond.mean + &l * z;
                    for (k, &j) in out.iter().enumerate() {
                        draw_buf[j] = draw[k];
                    }
                    scores.push(self.sample_score(&draw_buf, y));
                }
            }
        }
        let mean = scores.iter().sum::<f64>() / samples as f64;
        let se = if samples > 1 {
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                / (samples - 1) as f64;
            Some((var / samples as f64).sqrt())
        } else {
            None
        };
        Ok((mean, se))
    }

    fn sample_score(&self, xt: &DVector<f64>, y: f64) -> f64 {
        match self.spec.rule {
            ScoringRule::SquaredError => {
                let w = self.posterior.feature_weights();
                let mean = self.posterior.intercept_weight() + w.dot(xt);
                (mean - y) * (mean - y)
            }
            ScoringRule::NegativeLogPredictiveDensity => self.nlpd_at(xt, y),
        }
    }
}

struct ConditionalGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Gaussian conditional of the `out` block given the `cond` block at the
/// observed values; with `cond` empty this is the joint marginal.
fn conditional_gaussian(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    out: &[usize],
    cond: &[usize],
    x: &DVector<f64>,
) -> Result<ConditionalGaussian> {
    let mu_o = subvector(mean, out);
    let sigma_oo = submatrix(cov, out, out);
    if cond.is_empty() {
        return Ok(ConditionalGaussian {
            mean: mu_o,
            cov: sigma_oo,
        });
    }
    let chol = spd_cholesky(&submatrix(cov, cond, cond))?;
    let sigma_co = submatrix(cov, cond, out);
    let solved = chol.solve(&sigma_co); // Sigma_cc^-1 Sigma_co
    let a = solved.transpose(); // out x cond
    let delta = subvector(x, cond) - subvector(mean, cond);
    Ok(ConditionalGaussian {
        mean: &mu_o + &a * delta,
        cov: sigma_oo - &a * sigma_co,
    })
}

/// Build the Schur pieces for the law of the non-fixed coordinates given the
/// `conditioning` ones (the joint marginal when `conditioning` is empty).
pub(crate) fn coalition_plan(
    fm_mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    fixed: &[usize],
    conditioning: &[usize],
) -> Result<CoalitionPlan> {
    let n = fm_mean.len();
    let out: Vec<usize> = (0..n).filter(|i| !fixed.contains(i)).collect();
    let mu_out = subvector(fm_mean, &out);
    if out.is_empty() || conditioning.is_empty() {
        return Ok(CoalitionPlan {
            fixed: fixed.to_vec(),
            cov_out: submatrix(cov, &out, &out),
            out,
            regression: None,
            mu_out,
            cond_mean: DVector::zeros(0),
        });
    }
    let chol = spd_cholesky(&submatrix(cov, conditioning, conditioning))?;
    let sigma_co = submatrix(cov, conditioning, &out);
    let a = chol.solve(&sigma_co).transpose(); // out x cond
    let cov_out = submatrix(cov, &out, &out) - &a * &sigma_co;
    Ok(CoalitionPlan {
        fixed: fixed.to_vec(),
        out,
        regression: Some((conditioning.to_vec(), a)),
        cov_out,
        mu_out,
        cond_mean: subvector(fm_mean, conditioning),
    })
}

/// Exact expectation of the plug-in squared error under a Gaussian law on the
/// non-fixed coordinates. `conditioning ⊆ fixed` selects which observed values
/// shape that law; pass an empty slice for the marginal. This generalized form
/// is what the effect decomposition needs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn expected_squared_error(
    w0: f64,
    weights: &DVector<f64>,
    fm_mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    fixed: &[usize],
    conditioning: &[usize],
    x: &DVector<f64>,
    y: f64,
) -> Result<f64> {
    coalition_plan(fm_mean, cov, fixed, conditioning)
        .map(|p| p.expected_squared_error(w0, weights, x, y))
}

/// Jittered covariance as used by evaluators; exposed for the decomposition.
pub(crate) fn jittered_covariance(fm: &FeatureModel) -> DMatrix<f64> {
    let n = fm.dim();
    let jitter = JITTER_REL * (fm.covariance().trace() / n.max(1) as f64).abs().max(1e-12);
    fm.covariance() + DMatrix::<f64>::identity(n, n) * jitter
}

/// One-shot lift evaluation; see [`LiftEvaluator`] for the reusable form.
#[allow(clippy::too_many_arguments)]
pub fn eval_lift(
    spec: &LiftSpec,
    posterior: &PosteriorState,
    fm: &FeatureModel,
    num_central: usize,
    coalition: &Coalition,
    x: &DVector<f64>,
    y: f64,
    seed: u64,
) -> Result<f64> {
    LiftEvaluator::new(*spec, posterior, fm, num_central)?.eval(coalition, x, y, seed)
}

/// Exact closed-form squared-error lift for a linear model: the expectation of
/// `(E[w] . x~ - y)^2` with in-coalition coordinates fixed and the rest drawn
/// from the conditional (observational) or marginal (interventional) Gaussian.
pub fn closed_form_quadratic_score(
    posterior: &PosteriorState,
    fm: &FeatureModel,
    num_central: usize,
    coalition: &Coalition,
    x: &DVector<f64>,
    y: f64,
    conditioning: Conditioning,
) -> Result<f64> {
    let spec = LiftSpec::closed_form(conditioning);
    eval_lift(&spec, posterior, fm, num_central, coalition, x, y, 0)
}

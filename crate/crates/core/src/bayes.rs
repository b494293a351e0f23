//! Online Bayesian linear regression with conjugate Gaussian updates,
//! exponential forgetting, and recursive expected-loss tracking.
//!
//! The model is `y = w · x + noise` with a centered isotropic Gaussian prior
//! `w ~ N(0, (1/alpha) I)` and Gaussian likelihood of precision `beta`. After
//! each observation the posterior is refreshed conjugately and then interpolated
//! towards the original prior in natural-parameter space:
//!
//! ```text
//! precision' = tau * precision_post + (1 - tau) * alpha * I
//! eta'       = tau * eta_post                       (eta = precision * mean)
//! ```
//!
//! which is the Gaussian form of tempering the posterior with exponent `tau`
//! against the prior with exponent `1 - tau`. With `tau = 1` the recursion
//! reproduces batch ridge regression with ridge parameter `alpha / beta`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the regression task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Prior precision `alpha` of the isotropic Gaussian prior over weights.
    pub prior_precision: f64,
    /// Likelihood (noise) precision `beta`; the noise variance `1/beta` is a
    /// fixed hyperparameter, not fitted.
    pub noise_precision: f64,
    /// Forgetting factor `tau` in (0, 1]; 1 disables forgetting.
    pub forgetting: f64,
    /// Include a constant intercept term as the leading coefficient.
    pub include_intercept: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prior_precision: 1.0,
            noise_precision: 1.0,
            forgetting: 0.999,
            include_intercept: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.prior_precision.is_finite() || self.prior_precision <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "prior_precision must be a positive real, got {}",
                self.prior_precision
            )));
        }
        if !self.noise_precision.is_finite() || self.noise_precision <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise_precision must be a positive real, got {}",
                self.noise_precision
            )));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "forgetting must lie in (0, 1], got {}",
                self.forgetting
            )));
        }
        Ok(())
    }
}

/// Gaussian belief over the regression coefficients, stored as mean vector and
/// precision matrix. When the model has an intercept it occupies coordinate 0.
#[derive(Clone, Debug)]
pub struct PosteriorState {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    include_intercept: bool,
}

/// Gaussian predictive distribution for a single target observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: f64,
    /// Noise variance plus posterior uncertainty; never below `1/beta`.
    pub variance: f64,
}

/// Negatively oriented strictly proper scoring rules on predictive
/// distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringRule {
    SquaredError,
    #[serde(alias = "nlpd")]
    NegativeLogPredictiveDensity,
}

/// Initialize the posterior to the prior: zero mean, precision `alpha * I`.
///
/// `n_features` counts model inputs only; the intercept, when configured, adds
/// one more coefficient.
pub fn init_posterior(config: &ModelConfig, n_features: usize) -> Result<PosteriorState> {
    config.validate()?;
    let dim = n_features + usize::from(config.include_intercept);
    if dim == 0 {
        return Err(Error::InvalidParameter(
            "posterior dimension is zero: no features and no intercept".into(),
        ));
    }
    Ok(PosteriorState {
        mean: DVector::zeros(dim),
        precision: DMatrix::identity(dim, dim) * config.prior_precision,
        include_intercept: config.include_intercept,
    })
}

impl PosteriorState {
    /// Build a posterior from an explicit mean and precision. Used for
    /// externally supplied (e.g. population-exact) coefficient beliefs.
    pub fn from_mean_precision(
        mean: DVector<f64>,
        precision: DMatrix<f64>,
        include_intercept: bool,
    ) -> Result<Self> {
        if precision.nrows() != precision.ncols() || precision.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: precision.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) || precision.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean or precision".into()));
        }
        if Cholesky::new(precision.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("supplied precision".into()));
        }
        Ok(Self {
            mean,
            precision,
            include_intercept,
        })
    }

    /// Point-mass-like posterior at the given coefficients (a very large
    /// isotropic precision), for plug-in evaluation against known weights.
    pub fn from_point_weights(
        intercept: Option<f64>,
        feature_weights: &[f64],
        precision_scale: f64,
    ) -> Result<Self> {
        let include_intercept = intercept.is_some();
        let mut coords = Vec::with_capacity(feature_weights.len() + 1);
        if let Some(w0) = intercept {
            coords.push(w0);
        }
        coords.extend_from_slice(feature_weights);
        let dim = coords.len();
        Self::from_mean_precision(
            DVector::from_vec(coords),
            DMatrix::identity(dim, dim) * precision_scale,
            include_intercept,
        )
    }

    /// Total coefficient count, intercept included.
    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    /// Number of model inputs (dimension minus the intercept).
    pub fn feature_dimension(&self) -> usize {
        self.mean.len() - usize::from(self.include_intercept)
    }

    pub fn has_intercept(&self) -> bool {
        self.include_intercept
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Posterior covariance, materialized on demand.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Cholesky::new(self.precision.clone())
            .map(|c| c.inverse())
            .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))
    }

    pub fn intercept_weight(&self) -> f64 {
        if self.include_intercept {
            self.mean[0]
        } else {
            0.0
        }
    }

    /// Coefficients on the model inputs, intercept excluded.
    pub fn feature_weights(&self) -> DVector<f64> {
        let skip = usize::from(self.include_intercept);
        DVector::from_fn(self.feature_dimension(), |i, _| self.mean[skip + i])
    }

    fn design_row(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.feature_dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dimension(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input vector".into()));
        }
        if self.include_intercept {
            let mut phi = DVector::zeros(x.len() + 1);
            phi[0] = 1.0;
            phi.rows_mut(1, x.len()).copy_from(x);
            Ok(phi)
        } else {
            Ok(x.clone())
        }
    }
}

/// One conjugate update with exponential forgetting. Returns the new state;
/// the input state is untouched.
pub fn update(
    state: &PosteriorState,
    x: &DVector<f64>,
    y: f64,
    config: &ModelConfig,
) -> Result<PosteriorState> {
    config.validate()?;
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("target value {y}")));
    }
    let phi = state.design_row(x)?;
    let beta = config.noise_precision;
    let tau = config.forgetting;
    let dim = state.dimension();

    let precision_post = &state.precision + (&phi * phi.transpose()) * beta;
    let eta_post = &state.precision * &state.mean + &phi * (beta * y);

    let precision_new = precision_post * tau
        + DMatrix::<f64>::identity(dim, dim) * ((1.0 - tau) * config.prior_precision);
    let eta_new = eta_post * tau;

    let chol = Cholesky::new(precision_new.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("updated posterior precision".into()))?;
    let mean_new = chol.solve(&eta_new);

    Ok(PosteriorState {
        mean: mean_new,
        precision: precision_new,
        include_intercept: state.include_intercept,
    })
}

/// Predictive distribution at `x`: mean `E[w] . x`, variance
/// `1/beta + x^T precision^-1 x`.
pub fn predict(
    state: &PosteriorState,
    x: &DVector<f64>,
    config: &ModelConfig,
) -> Result<PredictiveDistribution> {
    let phi = state.design_row(x)?;
    let chol = Cholesky::new(state.precision.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    let solved = chol.solve(&phi);
    let posterior_term = phi.dot(&solved);
    Ok(PredictiveDistribution {
        mean: state.mean.dot(&phi),
        variance: 1.0 / config.noise_precision + posterior_term,
    })
}

/// Per-step loss of a predictive distribution under the given rule. Smaller is
/// better for both rules.
pub fn score(pred: &PredictiveDistribution, y: f64, rule: ScoringRule) -> f64 {
    match rule {
        ScoringRule::SquaredError => (pred.mean - y) * (pred.mean - y),
        ScoringRule::NegativeLogPredictiveDensity => {
            let v = pred.variance;
            0.5 * (2.0 * std::f64::consts::PI * v).ln() + (y - pred.mean) * (y - pred.mean) / (2.0 * v)
        }
    }
}

/// Recursive estimate of the expected loss:
/// `E[l]_t = (1 - tau) * l_t + tau * E[l]_{t-1}`.
///
/// By default the tracker seeds itself with the first observed loss so the
/// estimate is always a convex combination of observed values; an explicit
/// initialization is available where a fixed origin is wanted.
#[derive(Clone, Copy, Debug)]
pub struct LossTracker {
    value: Option<f64>,
    forgetting: f64,
}

impl LossTracker {
    pub fn new(forgetting: f64) -> Self {
        Self {
            value: None,
            forgetting,
        }
    }

    pub fn with_initial(value: f64, forgetting: f64) -> Self {
        Self {
            value: Some(value),
            forgetting,
        }
    }

    pub fn observe(&mut self, step_loss: f64) -> Result<()> {
        if !step_loss.is_finite() {
            return Err(Error::NonFinite(format!("step loss {step_loss}")));
        }
        let tau = self.forgetting;
        self.value = Some(match self.value {
            None => step_loss,
            Some(v) => (1.0 - tau) * step_loss + tau * v,
        });
        Ok(())
    }

    /// Current estimate; `None` until the first observation (unless seeded).
    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

//! Regression markets: a data market for supervised learning in which support
//! agents sell features to a central agent and are rewarded for the resulting
//! improvement in predictive performance.
//!
//! Coalition values are computed by a *lifting function* that scores a model on
//! a partial feature set by averaging the missing features under either their
//! observational conditional law or their (interventional) marginal law. The
//! two choices produce very different incentives: observational conditioning
//! rewards replicated features through backdoor correlations, while the
//! interventional lift pays only for direct effects and is therefore robust to
//! replication attacks.
//!
//! Module map:
//! - [`dataset`]: ingestion, lagging, pre-screening, synthetic generators.
//! - [`bayes`]: online Bayesian linear regression with exponential forgetting.
//! - [`lift`]: coalition value functions (closed-form Gaussian and Monte Carlo).
//! - [`allocation`]: Shapley / Banzhaf / Robust-Shapley semivalues, effect
//!   decomposition and collinearity diagnostics.
//! - [`market`]: two-stage online market clearing and ledgers.
//! - [`attack`]: replication attacks and robustness verdicts.

pub mod allocation;
pub mod attack;
pub mod bayes;
pub mod dataset;
pub mod error;
pub mod lift;
pub mod market;
mod stats;

pub use error::{Error, Result};

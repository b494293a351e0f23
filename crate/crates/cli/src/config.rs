//! Experiment configuration: TOML schema, validation, and resolution into a
//! concrete runnable plan with every default made explicit.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use regression_markets::allocation::Similarity;
use regression_markets::bayes::{ModelConfig, ScoringRule};
use regression_markets::dataset::{ReplicateEntry, SyntheticSpec};
use regression_markets::lift::{Backend, Conditioning, LiftSpec};
use regression_markets::market::{AllocationMethod, GameMode};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Raw experiment configuration as parsed from TOML.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    pub lift: LiftSection,
    pub market: MarketSection,
    pub allocation: AllocationSection,
    #[serde(default)]
    pub attack: Option<AttackSection>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSource>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub manifest: PathBuf,
    pub target_column: String,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub lag: usize,
    #[serde(default)]
    pub prescreen_threshold: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub length: usize,
    pub confounder_strength: f64,
    pub true_weights: Vec<f64>,
    pub noise_std: f64,
    #[serde(default)]
    pub replicates: Vec<SyntheticReplicate>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticReplicate {
    pub feature: usize,
    pub count: usize,
    pub noise_std: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_prior_precision")]
    pub prior_precision: f64,
    #[serde(default = "default_noise_precision")]
    pub noise_precision: f64,
    #[serde(default = "default_forgetting")]
    pub forgetting: f64,
    #[serde(default = "default_intercept")]
    pub intercept: bool,
}

fn default_prior_precision() -> f64 {
    1.0
}
fn default_noise_precision() -> f64 {
    1.0
}
fn default_forgetting() -> f64 {
    0.999
}
fn default_intercept() -> bool {
    true
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            prior_precision: default_prior_precision(),
            noise_precision: default_noise_precision(),
            forgetting: default_forgetting(),
            intercept: default_intercept(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LiftSection {
    pub conditioning: Conditioning,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_rule")]
    pub rule: ScoringRule,
}

fn default_backend() -> Backend {
    Backend::ClosedFormGaussian
}
fn default_mc_samples() -> usize {
    1000
}
fn default_rule() -> ScoringRule {
    ScoringRule::SquaredError
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub valuation: f64,
    #[serde(default)]
    pub train_fraction: Option<f64>,
    #[serde(default)]
    pub train_window: Option<[usize; 2]>,
    #[serde(default)]
    pub test_window: Option<[usize; 2]>,
    #[serde(default = "default_game_mode")]
    pub in_sample_game: GameMode,
}

fn default_game_mode() -> GameMode {
    GameMode::Marginalize
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationSection {
    pub method: MethodName,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_similarity")]
    pub similarity: Similarity,
}

fn default_permutations() -> usize {
    2000
}
fn default_gamma() -> f64 {
    1.0
}
fn default_similarity() -> Similarity {
    Similarity::Pearson
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    ShapleyExact,
    ShapleySampled,
    Banzhaf,
    RobustShapley,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub attacker: String,
    /// Feature names to replicate; all attacker features when omitted.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Absolute replicate noise std; defaults to 0.05 x the source column std.
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Verdict tolerance on cumulative reward deltas. The default is the
    /// closed-form tier; runs on trained posteriors carry estimation noise and
    /// usually warrant a looser, scale-aware value.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_replicates() -> usize {
    1
}
fn default_k_max() -> usize {
    8
}

/// One validation finding, pointing at the offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Collect every violated invariant without executing anything.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |field: &str, message: String| {
            v.push(Violation {
                field: field.to_string(),
                message,
            })
        };

        if self.schema_version != SCHEMA_VERSION {
            push(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            );
        }

        match (&self.data.csv, &self.data.synthetic) {
            (None, None) => push("data", "exactly one of data.csv / data.synthetic required".into()),
            (Some(_), Some(_)) => push(
                "data",
                "data.csv and data.synthetic are mutually exclusive".into(),
            ),
            (Some(csv), None) => {
                if !csv.path.exists() {
                    push("data.csv.path", format!("{} does not exist", csv.path.display()));
                }
                if !csv.manifest.exists() {
                    push(
                        "data.csv.manifest",
                        format!("{} does not exist", csv.manifest.display()),
                    );
                }
                if let Some(threshold) = csv.prescreen_threshold {
                    if !(threshold > 0.0 && threshold <= 1.0) {
                        push(
                            "data.csv.prescreen_threshold",
                            format!("must lie in (0, 1], got {threshold}"),
                        );
                    }
                }
            }
            (None, Some(synth)) => {
                let spec = synth.to_spec();
                if let Err(e) = spec.validate() {
                    push("data.synthetic", e.to_string());
                }
            }
        }

        if !self.model.prior_precision.is_finite() || self.model.prior_precision <= 0.0 {
            push(
                "model.prior_precision",
                format!("must be > 0, got {}", self.model.prior_precision),
            );
        }
        if !self.model.noise_precision.is_finite() || self.model.noise_precision <= 0.0 {
            push(
                "model.noise_precision",
                format!("must be > 0, got {}", self.model.noise_precision),
            );
        }
        if !(self.model.forgetting > 0.0 && self.model.forgetting <= 1.0) {
            push(
                "model.forgetting",
                format!("must lie in (0, 1], got {}", self.model.forgetting),
            );
        }

        if self.lift.backend == Backend::MonteCarlo && self.lift.mc_samples == 0 {
            push("lift.mc_samples", "must be at least 1".into());
        }
        if self.lift.backend == Backend::ClosedFormGaussian
            && self.lift.rule != ScoringRule::SquaredError
        {
            push(
                "lift.rule",
                "closed-form-gaussian backend supports squared-error only".into(),
            );
        }

        if !self.market.valuation.is_finite() || self.market.valuation < 0.0 {
            push(
                "market.valuation",
                format!("must be a finite nonnegative real, got {}", self.market.valuation),
            );
        }
        match (
            self.market.train_fraction,
            self.market.train_window,
            self.market.test_window,
        ) {
            (Some(f), None, None) => {
                if !(f > 0.0 && f < 1.0) {
                    push(
                        "market.train_fraction",
                        format!("must lie in (0, 1), got {f}"),
                    );
                }
            }
            (None, Some(train), Some(test)) => {
                if train[0] >= train[1] {
                    push("market.train_window", "window is empty or reversed".into());
                }
                if test[0] < train[1] {
                    push(
                        "market.test_window",
                        "must start at or after the training window ends".into(),
                    );
                }
                if test[1] < test[0] {
                    push("market.test_window", "window is reversed".into());
                }
            }
            _ => push(
                "market",
                "set either train_fraction or both train_window and test_window".into(),
            ),
        }

        if self.allocation.method == MethodName::ShapleySampled && self.allocation.permutations == 0
        {
            push("allocation.permutations", "must be at least 1".into());
        }
        if self.allocation.method == MethodName::RobustShapley
            && (!self.allocation.gamma.is_finite() || self.allocation.gamma < 0.0)
        {
            push(
                "allocation.gamma",
                format!("must be finite and nonnegative, got {}", self.allocation.gamma),
            );
        }

        if let Some(attack) = &self.attack {
            if attack.attacker.is_empty() {
                push("attack.attacker", "must name a support agent".into());
            }
            if let Some(noise) = attack.noise_std {
                if !noise.is_finite() || noise < 0.0 {
                    push(
                        "attack.noise_std",
                        format!("must be finite and nonnegative, got {noise}"),
                    );
                }
            }
            if attack.k_max == 0 {
                push("attack.k_max", "must be at least 1".into());
            }
            if !attack.tolerance.is_finite() || attack.tolerance < 0.0 {
                push(
                    "attack.tolerance",
                    format!("must be finite and nonnegative, got {}", attack.tolerance),
                );
            }
        }
        v
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            prior_precision: self.model.prior_precision,
            noise_precision: self.model.noise_precision,
            forgetting: self.model.forgetting,
            include_intercept: self.model.intercept,
        }
    }

    pub fn lift_spec(&self) -> LiftSpec {
        LiftSpec {
            conditioning: self.lift.conditioning,
            backend: self.lift.backend,
            mc_samples: self.lift.mc_samples,
            rule: self.lift.rule,
        }
    }

    pub fn allocation_method(&self) -> AllocationMethod {
        match self.allocation.method {
            MethodName::ShapleyExact => AllocationMethod::ShapleyExact,
            MethodName::ShapleySampled => AllocationMethod::ShapleySampled {
                permutations: self.allocation.permutations,
                antithetic: self.allocation.antithetic,
            },
            MethodName::Banzhaf => AllocationMethod::Banzhaf,
            MethodName::RobustShapley => AllocationMethod::RobustShapley {
                gamma: self.allocation.gamma,
                similarity: self.allocation.similarity,
            },
        }
    }

    /// Windows over `rows` data rows, from the explicit pair or the fraction.
    pub fn windows(&self, rows: usize) -> Result<(Range<usize>, Range<usize>), CliError> {
        if let (Some(train), Some(test)) = (self.market.train_window, self.market.test_window) {
            if test[1] > rows {
                return Err(CliError::Config(format!(
                    "market.test_window: ends at {} but the data has {rows} rows",
                    test[1]
                )));
            }
            return Ok((train[0]..train[1], test[0]..test[1]));
        }
        let fraction = self.market.train_fraction.unwrap_or(0.8);
        let split = ((rows as f64) * fraction).floor() as usize;
        if split == 0 || split >= rows {
            return Err(CliError::Config(format!(
                "market.train_fraction: split {split} of {rows} rows leaves an empty stage"
            )));
        }
        Ok((0..split, split..rows))
    }
}

impl SyntheticSource {
    pub fn to_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            confounder_strength: self.confounder_strength,
            true_weights: self.true_weights.clone(),
            noise_std: self.noise_std,
            replicate_plan: self
                .replicates
                .iter()
                .map(|r| ReplicateEntry {
                    feature: r.feature,
                    count: r.count,
                    noise_std: r.noise_std,
                })
                .collect(),
            length: self.length,
        }
    }
}

/// Fully resolved configuration written next to the artifacts for provenance:
/// every default and every derived quantity made explicit.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: ResolvedData,
    pub model: ModelSection,
    pub lift: LiftSection,
    pub market: ResolvedMarket,
    pub allocation: AllocationSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<ResolvedAttack>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedData {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    pub rows: usize,
    pub support_features: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedMarket {
    pub valuation: f64,
    pub train_window: [usize; 2],
    pub test_window: [usize; 2],
    pub in_sample_game: GameMode,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedAttack {
    pub attacker: String,
    pub features: Vec<String>,
    pub replicates: usize,
    pub noise_std: f64,
    pub k_max: usize,
    pub tolerance: f64,
}

//! Two-stage online market clearing.
//!
//! Per time step, in order: forecast with the models from the previous step,
//! clear the market (loss trackers, revenue, allocation, rewards), then update
//! the posteriors when in the training stage. Revenue is the valuation times
//! the tracked loss improvement of the full model over the central-only model,
//! floored at zero; rewards follow the tracked expected allocation so that the
//! sum of rewards equals the revenue for Shapley allocation.

use std::io::Write;
use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    self, AllocationResult, LiftGame, Method, SampleOptions, Similarity, TabulatedGame,
};
use crate::bayes::{self, LossTracker, ModelConfig, PosteriorState};
use crate::dataset::{AgentId, MarketData};
use crate::error::{Error, Result};
use crate::lift::{fit_feature_model, Backend, Coalition, CoalitionPlan, FeatureModel, LiftEvaluator, LiftSpec};

/// Market stage a ledger entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    InSample,
    OutOfSample,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::InSample => f.write_str("in-sample"),
            Stage::OutOfSample => f.write_str("out-of-sample"),
        }
    }
}

/// Revenue allocation policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum AllocationMethod {
    ShapleyExact,
    ShapleySampled {
        permutations: usize,
        #[serde(default)]
        antithetic: bool,
    },
    Banzhaf,
    RobustShapley {
        gamma: f64,
        similarity: Similarity,
    },
}

impl AllocationMethod {
    pub fn id(&self) -> Method {
        match self {
            AllocationMethod::ShapleyExact => Method::ShapleyExact,
            AllocationMethod::ShapleySampled { .. } => Method::ShapleySampled,
            AllocationMethod::Banzhaf => Method::Banzhaf,
            AllocationMethod::RobustShapley { .. } => Method::RobustShapley,
        }
    }
}

/// Externally supplied models: run the market without any online training.
#[derive(Clone, Debug)]
pub struct FixedModels {
    pub full: PosteriorState,
    pub central: PosteriorState,
    pub feature_model: FeatureModel,
}

/// Whether posteriors are trained online or supplied.
#[derive(Clone, Debug)]
pub enum InferenceMode {
    Online,
    Fixed(Box<FixedModels>),
}

/// How in-sample coalition values are produced: by marginalizing a single
/// full-feature posterior through the lift, or by maintaining one online
/// posterior per coalition (the literal coalition-score semantics). The
/// out-of-sample stage always uses the lift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GameMode {
    Marginalize,
    Retrain,
}

/// Everything needed to clear one market instantiation.
#[derive(Clone, Debug)]
pub struct MarketTask {
    /// Valuation `lambda`: currency per time step per unit loss improvement.
    pub valuation: f64,
    pub model: ModelConfig,
    pub lift: LiftSpec,
    pub allocation: AllocationMethod,
    pub train_window: Range<usize>,
    pub test_window: Range<usize>,
    pub inference: InferenceMode,
    pub in_sample_game: GameMode,
    pub seed: u64,
}

impl MarketTask {
    pub fn validate(&self) -> Result<()> {
        if !self.valuation.is_finite() || self.valuation < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "valuation must be a finite nonnegative real, got {}",
                self.valuation
            )));
        }
        self.model.validate()?;
        self.lift.validate()?;
        if self.train_window.start >= self.train_window.end {
            return Err(Error::Window("training window is empty".into()));
        }
        if self.test_window.start < self.train_window.end {
            return Err(Error::Window(
                "test window must start at or after the end of the training window".into(),
            ));
        }
        if self.test_window.end < self.test_window.start {
            return Err(Error::Window("test window is reversed".into()));
        }
        if let AllocationMethod::ShapleySampled { permutations, .. } = self.allocation {
            if permutations == 0 {
                return Err(Error::InvalidParameter(
                    "sampled allocation needs at least one permutation".into(),
                ));
            }
        }
        if let AllocationMethod::RobustShapley { gamma, .. } = self.allocation {
            if !gamma.is_finite() || gamma < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "robust-shapley gamma must be finite and nonnegative, got {gamma}"
                )));
            }
        }
        Ok(())
    }
}

/// One row of the market ledger.
#[derive(Clone, Debug)]
pub struct LedgerEntry {
    pub t: usize,
    pub timestamp: String,
    pub stage: Stage,
    /// Payment collected from the central agent this step.
    pub revenue: f64,
    /// Tracked expected loss of the central-only model.
    pub loss_base: f64,
    /// Tracked expected loss of the full model.
    pub loss_full: f64,
    /// Per support agent, in market order.
    pub rewards: Vec<(AgentId, f64)>,
}

/// Per-stage and cumulative outcomes of a run.
#[derive(Clone, Debug)]
pub struct MarketSummary {
    /// Fractional improvement of the mean per-step loss, support agents
    /// included vs central-only, per stage. `None` when a stage is empty or
    /// the central loss is nonpositive.
    pub in_sample_improvement: Option<f64>,
    pub out_of_sample_improvement: Option<f64>,
    pub cumulative_revenue: f64,
    pub cumulative_rewards: Vec<(AgentId, f64)>,
    /// Final tracked expected allocation per support feature index.
    pub expected_allocation: Vec<(usize, f64)>,
}

impl MarketSummary {
    pub fn cumulative_reward_of(&self, agent: &AgentId) -> f64 {
        self.cumulative_rewards
            .iter()
            .find(|(a, _)| a == agent)
            .map(|(_, r)| *r)
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct MarketRun {
    pub ledger: Vec<LedgerEntry>,
    pub summary: MarketSummary,
    pub method: Method,
}

impl MarketRun {
    /// Reward share of one agent: cumulative reward over cumulative revenue.
    pub fn reward_share(&self, agent: &AgentId) -> f64 {
        if self.summary.cumulative_revenue > 0.0 {
            self.summary.cumulative_reward_of(agent) / self.summary.cumulative_revenue
        } else {
            0.0
        }
    }
}

/// Online market-clearing engine; [`step`](Self::step) is one forecast ->
/// clear -> update cycle.
pub struct MarketEngine<'a> {
    task: &'a MarketTask,
    data: &'a MarketData,
    fm: FeatureModel,
    central: PosteriorState,
    full: PosteriorState,
    central_tracker: LossTracker,
    full_tracker: LossTracker,
    /// Tracked expected allocation per support player, sums to at most one.
    alloc_tracker: Option<Vec<f64>>,
    players: Vec<usize>,
    robust_penalties: Option<Vec<f64>>,
    /// Per-coalition-mask posteriors for the retrained in-sample game.
    ensemble: Option<Vec<PosteriorState>>,
    /// Per-coalition Schur plans for the closed-form lift, indexed by mask.
    plans: Option<Vec<CoalitionPlan>>,
    per_step_losses: Vec<(Stage, f64, f64)>,
}

const RETRAIN_PLAYER_GUARD: usize = 12;

impl<'a> MarketEngine<'a> {
    pub fn new(task: &'a MarketTask, data: &'a MarketData) -> Result<Self> {
        task.validate()?;
        data.validate()?;
        if task.test_window.end > data.rows() {
            return Err(Error::Window(format!(
                "windows extend to {} but the data has {} rows",
                task.test_window.end,
                data.rows()
            )));
        }
        let m = data.num_central();
        let n = data.num_features();
        if m + usize::from(task.model.include_intercept) == 0 {
            return Err(Error::InvalidParameter(
                "central model needs at least one feature or an intercept".into(),
            ));
        }

        let (central, full, fm) = match &task.inference {
            InferenceMode::Online => (
                bayes::init_posterior(&task.model, m)?,
                bayes::init_posterior(&task.model, n)?,
                fit_feature_model(data, task.train_window.clone())?,
            ),
            InferenceMode::Fixed(models) => {
                if models.central.feature_dimension() != m {
                    return Err(Error::DimensionMismatch {
                        expected: m,
                        found: models.central.feature_dimension(),
                    });
                }
                if models.full.feature_dimension() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: models.full.feature_dimension(),
                    });
                }
                if models.feature_model.dim() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: models.feature_model.dim(),
                    });
                }
                (
                    models.central.clone(),
                    models.full.clone(),
                    models.feature_model.clone(),
                )
            }
        };

        if task.lift.backend == Backend::MonteCarlo
            && task.lift.conditioning == crate::lift::Conditioning::Interventional
            && fm.background().nrows() == 0
        {
            return Err(Error::UnsupportedBackend(
                "Monte Carlo interventional lift needs background rows in the feature model".into(),
            ));
        }

        let players: Vec<usize> = data.support_indices().collect();

        let robust_penalties = match task.allocation {
            AllocationMethod::RobustShapley { gamma, similarity } => {
                let window = data.slice_rows(task.train_window.clone())?;
                Some(allocation::robust_penalties(
                    &players, &window, gamma, similarity,
                )?)
            }
            _ => None,
        };

        let ensemble = match task.in_sample_game {
            GameMode::Marginalize => None,
            GameMode::Retrain => {
                if matches!(task.inference, InferenceMode::Fixed(_)) {
                    return Err(Error::UnsupportedBackend(
                        "the retrained in-sample game requires online inference".into(),
                    ));
                }
                if matches!(task.allocation, AllocationMethod::ShapleySampled { .. }) {
                    return Err(Error::UnsupportedBackend(
                        "the retrained in-sample game requires a tabulating allocation method"
                            .into(),
                    ));
                }
                let d = players.len();
                if d > RETRAIN_PLAYER_GUARD {
                    return Err(Error::TooManyPlayers {
                        players: d,
                        guard: RETRAIN_PLAYER_GUARD,
                    });
                }
                let mut models = Vec::with_capacity(1 << d);
                for mask in 0..1u64 << d {
                    let dim = m + mask.count_ones() as usize;
                    models.push(bayes::init_posterior(&task.model, dim)?);
                }
                Some(models)
            }
        };

        let mut engine = Self {
            task,
            data,
            fm,
            central,
            full,
            central_tracker: LossTracker::new(task.model.forgetting),
            full_tracker: LossTracker::new(task.model.forgetting),
            alloc_tracker: None,
            players,
            robust_penalties,
            ensemble,
            plans: None,
            per_step_losses: Vec::new(),
        };
        engine.plans = engine.build_plans()?;
        Ok(engine)
    }

    /// Closed-form Schur plans per coalition mask; `None` when the lift runs
    /// through Monte Carlo or the allocation does not tabulate.
    fn build_plans(&self) -> Result<Option<Vec<CoalitionPlan>>> {
        if self.task.lift.backend != Backend::ClosedFormGaussian {
            return Ok(None);
        }
        if matches!(self.task.allocation, AllocationMethod::ShapleySampled { .. }) {
            return Ok(None);
        }
        let d = self.players.len();
        if d > allocation::EXACT_PLAYER_GUARD {
            return Err(Error::TooManyPlayers {
                players: d,
                guard: allocation::EXACT_PLAYER_GUARD,
            });
        }
        let evaluator = self.evaluator()?;
        let mut plans = Vec::with_capacity(1 << d);
        for mask in 0..1u64 << d {
            plans.push(evaluator.plan(&Coalition::from_mask(mask, &self.players))?);
        }
        Ok(Some(plans))
    }

    fn evaluator(&self) -> Result<LiftEvaluator<'_>> {
        Ok(
            LiftEvaluator::new(self.task.lift, &self.full, &self.fm, self.data.num_central())?
                .with_noise_variance(1.0 / self.task.model.noise_precision),
        )
    }

    fn coalition_columns(&self, mask: u64) -> Vec<usize> {
        let mut cols: Vec<usize> = (0..self.data.num_central()).collect();
        cols.extend(
            self.players
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask >> bit & 1 == 1)
                .map(|(_, &p)| p),
        );
        cols
    }

    /// Coalition game at one observation.
    fn game_values(&self, x: &DVector<f64>, y: f64, stage: Stage, seed: u64) -> Result<Vec<f64>> {
        let d = self.players.len();
        if stage == Stage::InSample && self.task.in_sample_game == GameMode::Retrain {
            let ensemble = self.ensemble.as_ref().expect("ensemble built for retrain mode");
            let mut values = Vec::with_capacity(1 << d);
            for mask in 0..1u64 << d {
                let cols = self.coalition_columns(mask);
                let xs = DVector::from_fn(cols.len(), |k, _| x[cols[k]]);
                let pred = bayes::predict(&ensemble[mask as usize], &xs, &self.task.model)?;
                values.push(bayes::score(&pred, y, self.task.lift.rule));
            }
            return Ok(values);
        }
        if let Some(plans) = &self.plans {
            let w0 = self.full.intercept_weight();
            let weights = self.full.feature_weights();
            return Ok(plans
                .iter()
                .map(|p| p.expected_squared_error(w0, &weights, x, y))
                .collect());
        }
        let evaluator = self.evaluator()?;
        (0..1u64 << d)
            .map(|mask| {
                let coalition = Coalition::from_mask(mask, &self.players);
                evaluator.eval(
                    &coalition,
                    x,
                    y,
                    seed ^ mask.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )
            })
            .collect()
    }

    fn allocate(&self, x: &DVector<f64>, y: f64, stage: Stage, seed: u64) -> Result<AllocationResult> {
        if let AllocationMethod::ShapleySampled {
            permutations,
            antithetic,
        } = self.task.allocation
        {
            let evaluator = self.evaluator()?;
            let game = LiftGame::new(&evaluator, self.players.clone(), x.clone(), y, seed);
            return allocation::shapley_sampled_with_options(
                &game,
                SampleOptions {
                    permutations,
                    seed,
                    antithetic,
                },
            );
        }
        let values = self.game_values(x, y, stage, seed)?;
        let game = TabulatedGame::new(self.players.clone(), values)?;
        match self.task.allocation {
            AllocationMethod::ShapleyExact => allocation::shapley_exact(&game),
            AllocationMethod::Banzhaf => allocation::banzhaf(&game),
            AllocationMethod::RobustShapley { .. } => {
                let mut result = allocation::shapley_exact(&game)?;
                let penalties = self
                    .robust_penalties
                    .as_ref()
                    .expect("penalties precomputed for robust-shapley");
                for (v, p) in result.values.iter_mut().zip(penalties) {
                    *v *= p;
                }
                for (v, p) in result.normalized.iter_mut().zip(penalties) {
                    *v *= p;
                }
                result.method = Method::RobustShapley;
                Ok(result)
            }
            AllocationMethod::ShapleySampled { .. } => unreachable!("handled above"),
        }
    }

    /// One market step: forecast, clear, update (training stage only).
    pub fn step(&mut self, t: usize, stage: Stage) -> Result<LedgerEntry> {
        let x = self.data.row(t);
        let y = self.data.target()[t];
        let m = self.data.num_central();
        let x_central = DVector::from_fn(m, |i, _| x[i]);

        // Forecast with the models carried over from the previous step.
        let central_pred = bayes::predict(&self.central, &x_central, &self.task.model)?;
        let full_pred = bayes::predict(&self.full, &x, &self.task.model)?;
        let loss_central = bayes::score(&central_pred, y, self.task.lift.rule);
        let loss_full = bayes::score(&full_pred, y, self.task.lift.rule);
        if !loss_central.is_finite() || !loss_full.is_finite() {
            return Err(Error::NonFinite(format!("step loss at t = {t}")));
        }
        self.per_step_losses.push((stage, loss_central, loss_full));
        self.central_tracker.observe(loss_central)?;
        self.full_tracker.observe(loss_full)?;
        let tracked_central = self.central_tracker.value().expect("tracker seeded");
        let tracked_full = self.full_tracker.value().expect("tracker seeded");

        let mut revenue = self.task.valuation * (tracked_central - tracked_full).max(0.0);

        // Allocation and the tracked expected allocation.
        let step_seed = self.task.seed ^ (t as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
        let allocation = self.allocate(&x, y, stage, step_seed)?;
        let share_sum: f64 = allocation.normalized.iter().sum();
        if share_sum > 0.0 {
            let tau = self.task.model.forgetting;
            match &mut self.alloc_tracker {
                None => self.alloc_tracker = Some(allocation.normalized.clone()),
                Some(tracked) => {
                    for (e, phi) in tracked.iter_mut().zip(&allocation.normalized) {
                        *e = (1.0 - tau) * phi + tau * *e;
                    }
                }
            }
        } else {
            // Nothing allocatable this step: collect no revenue and leave the
            // tracked allocation untouched.
            revenue = 0.0;
        }

        let rewards = self.rewards_for(revenue);

        let entry = LedgerEntry {
            t,
            timestamp: self.data.timestamps()[t].clone(),
            stage,
            revenue,
            loss_base: tracked_central,
            loss_full: tracked_full,
            rewards,
        };

        if stage == Stage::InSample && matches!(self.task.inference, InferenceMode::Online) {
            self.central = bayes::update(&self.central, &x_central, y, &self.task.model)?;
            self.full = bayes::update(&self.full, &x, y, &self.task.model)?;
            if let Some(mut ensemble) = self.ensemble.take() {
                for (mask, model) in ensemble.iter_mut().enumerate() {
                    let cols = self.coalition_columns(mask as u64);
                    let xs = DVector::from_fn(cols.len(), |k, _| x[cols[k]]);
                    *model = bayes::update(model, &xs, y, &self.task.model)?;
                }
                self.ensemble = Some(ensemble);
            }
        }
        Ok(entry)
    }

    fn rewards_for(&self, revenue: f64) -> Vec<(AgentId, f64)> {
        let tracked = self.alloc_tracker.as_deref().unwrap_or(&[]);
        self.data
            .ownership()
            .iter()
            .map(|(agent, indices)| {
                let share: f64 = indices
                    .iter()
                    .map(|idx| {
                        self.players
                            .iter()
                            .position(|p| p == idx)
                            .and_then(|pos| tracked.get(pos))
                            .copied()
                            .unwrap_or(0.0)
                    })
                    .sum();
                (agent.clone(), revenue * share)
            })
            .collect()
    }

    fn summarize(&self, ledger: &[LedgerEntry]) -> MarketSummary {
        let improvement = |stage: Stage| -> Option<f64> {
            let losses: Vec<&(Stage, f64, f64)> = self
                .per_step_losses
                .iter()
                .filter(|(s, _, _)| *s == stage)
                .collect();
            if losses.is_empty() {
                return None;
            }
            let mean_c: f64 =
                losses.iter().map(|(_, c, _)| c).sum::<f64>() / losses.len() as f64;
            let mean_f: f64 =
                losses.iter().map(|(_, _, f)| f).sum::<f64>() / losses.len() as f64;
            (mean_c > 0.0).then(|| (mean_c - mean_f) / mean_c)
        };
        let mut cumulative: Vec<(AgentId, f64)> = self
            .data
            .ownership()
            .iter()
            .map(|(a, _)| (a.clone(), 0.0))
            .collect();
        for entry in ledger {
            for (i, (_, r)) in entry.rewards.iter().enumerate() {
                cumulative[i].1 += r;
            }
        }
        MarketSummary {
            in_sample_improvement: improvement(Stage::InSample),
            out_of_sample_improvement: improvement(Stage::OutOfSample),
            cumulative_revenue: ledger.iter().map(|e| e.revenue).sum(),
            cumulative_rewards: cumulative,
            expected_allocation: self
                .players
                .iter()
                .enumerate()
                .map(|(pos, &p)| {
                    (
                        p,
                        self.alloc_tracker
                            .as_ref()
                            .and_then(|t| t.get(pos))
                            .copied()
                            .unwrap_or(0.0),
                    )
                })
                .collect(),
        }
    }
}

/// Clear the market over the training window (in-sample stage) and then the
/// test window (out-of-sample stage, posteriors frozen).
pub fn run_market(task: &MarketTask, data: &MarketData) -> Result<MarketRun> {
    let mut engine = MarketEngine::new(task, data)?;
    let mut ledger = Vec::with_capacity(
        (task.train_window.end - task.train_window.start)
            + (task.test_window.end - task.test_window.start),
    );
    for t in task.train_window.clone() {
        ledger.push(engine.step(t, Stage::InSample)?);
    }
    for t in task.test_window.clone() {
        ledger.push(engine.step(t, Stage::OutOfSample)?);
    }
    let summary = engine.summarize(&ledger);
    Ok(MarketRun {
        ledger,
        summary,
        method: task.allocation.id(),
    })
}

/// Serialize a ledger as CSV with columns
/// `t,timestamp,stage,revenue,loss_base,loss_full,reward_<agent>...`, rows in
/// time order. Budget balance is re-checked at write time: Shapley rewards
/// must sum to the revenue (tolerance 1e-9) and Robust-Shapley rewards must
/// not exceed it.
pub fn write_ledger_csv<W: Write>(run: &MarketRun, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "t".to_string(),
        "timestamp".to_string(),
        "stage".to_string(),
        "revenue".to_string(),
        "loss_base".to_string(),
        "loss_full".to_string(),
    ];
    if let Some(first) = run.ledger.first() {
        header.extend(first.rewards.iter().map(|(a, _)| format!("reward_{a}")));
    }
    w.write_record(&header)?;
    for entry in &run.ledger {
        check_budget(run.method, entry)?;
        let mut record = vec![
            entry.t.to_string(),
            entry.timestamp.clone(),
            entry.stage.to_string(),
            entry.revenue.to_string(),
            entry.loss_base.to_string(),
            entry.loss_full.to_string(),
        ];
        record.extend(entry.rewards.iter().map(|(_, r)| r.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn check_budget(method: Method, entry: &LedgerEntry) -> Result<()> {
    let total: f64 = entry.rewards.iter().map(|(_, r)| r).sum();
    let violated = match method {
        Method::ShapleyExact | Method::ShapleySampled => {
            (total - entry.revenue).abs() > 1e-9 + 1e-12 * entry.revenue.abs()
        }
        Method::RobustShapley => total > entry.revenue + 1e-9,
        Method::Banzhaf => false,
    };
    if violated {
        return Err(Error::BudgetBalance {
            t: entry.t,
            rewards: total,
            revenue: entry.revenue,
        });
    }
    Ok(())
}

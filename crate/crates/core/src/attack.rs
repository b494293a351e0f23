//! Replication attacks and robustness verdicts.
//!
//! A replicate is the original feature plus centered finite-variance noise,
//! submitted under a fresh pseudo-identity. For market clearing the
//! pseudo-identities are ordinary agents; for verdicts their rewards fold back
//! into the attacker. Classification follows the reward deltas between an
//! honest run and an attacked run executed with identical seeds and windows.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bayes::PosteriorState;
use crate::dataset::{AgentId, MarketData};
use crate::error::{Error, Result};
use crate::lift::{Conditioning, FeatureModel};
use crate::market::{
    run_market, AllocationMethod, FixedModels, InferenceMode, MarketRun, MarketTask,
};

/// A replication attack: the attacker resubmits `count` noisy copies of each
/// listed feature under fresh identities. Zero noise is the exact-duplicate
/// limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub attacker: AgentId,
    /// (support feature index, replicate count) pairs; a zero count is the
    /// identity.
    pub replicate_plan: Vec<(usize, usize)>,
    pub replicate_noise_std: f64,
    /// Recorded intent only: a spiteful attacker accepts a lower own reward to
    /// depress others'. Verdicts report per-victim deltas either way.
    #[serde(default)]
    pub spiteful: bool,
}

impl AttackScenario {
    pub fn validate(&self, data: &MarketData) -> Result<()> {
        if !self.replicate_noise_std.is_finite() || self.replicate_noise_std < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "replicate noise std must be finite and nonnegative, got {}",
                self.replicate_noise_std
            )));
        }
        if !data.support_agents().any(|a| a == &self.attacker) {
            return Err(Error::InvalidParameter(format!(
                "attacker {} is not a support agent",
                self.attacker
            )));
        }
        for &(feature, _) in &self.replicate_plan {
            if feature < data.num_central() {
                return Err(Error::InvalidParameter(format!(
                    "cannot replicate central feature {feature}"
                )));
            }
            if feature >= data.num_features() {
                return Err(Error::InvalidParameter(format!(
                    "replicated feature {feature} out of range"
                )));
            }
            match data.owner_of(feature) {
                Some(owner) if owner == &self.attacker => {}
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "attacker {} does not own feature {feature}",
                        self.attacker
                    )))
                }
            }
        }
        Ok(())
    }

    /// Every attacker feature of `data`, replicated `k` times each.
    pub fn replicate_all(attacker: AgentId, data: &MarketData, k: usize, noise_std: f64) -> Result<Self> {
        let features: Vec<(usize, usize)> = data
            .ownership()
            .iter()
            .find(|(a, _)| a == &attacker)
            .map(|(_, idx)| idx.iter().map(|&i| (i, k)).collect())
            .ok_or_else(|| {
                Error::InvalidParameter(format!("attacker {attacker} is not a support agent"))
            })?;
        Ok(Self {
            attacker,
            replicate_plan: features,
            replicate_noise_std: noise_std,
            spiteful: false,
        })
    }

    /// Deterministic pseudo-identity for the `k`-th replicate of a feature.
    pub fn pseudo_id(&self, feature: usize, k: usize) -> AgentId {
        AgentId::new(format!("{}~f{feature}r{}", self.attacker, k + 1))
    }

    pub fn pseudo_ids(&self) -> Vec<AgentId> {
        self.replicate_plan
            .iter()
            .flat_map(|&(feature, count)| (0..count).map(move |k| self.pseudo_id(feature, k)))
            .collect()
    }

    fn total_replicates(&self) -> usize {
        self.replicate_plan.iter().map(|(_, k)| k).sum()
    }
}

/// Augment the data with the scenario's replicates, registered under fresh
/// pseudo-identities. Deterministic for a fixed seed.
pub fn apply_attack(data: &MarketData, scenario: &AttackScenario, seed: u64) -> Result<MarketData> {
    scenario.validate(data)?;
    if scenario.total_replicates() == 0 {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = Vec::with_capacity(scenario.total_replicates());
    for &(feature, count) in &scenario.replicate_plan {
        let source = data.column(feature);
        for k in 0..count {
            let column = if scenario.replicate_noise_std > 0.0 {
                let noise = Normal::new(0.0, scenario.replicate_noise_std).expect("positive std");
                source.iter().map(|v| v + noise.sample(&mut rng)).collect()
            } else {
                source.clone()
            };
            columns.push((
                format!("{}~r{}", data.feature_names()[feature], k + 1),
                scenario.pseudo_id(feature, k),
                column,
            ));
        }
    }
    data.append_support_columns(columns)
}

/// Robustness classification against the definitions: strict means no agent's
/// reward moved, weak means the attacker gained nothing (others may have
/// lost), and not-robust means the attacker profited.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    Strict,
    Weak,
    NotRobust,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Classification::Strict => f.write_str("strict"),
            Classification::Weak => f.write_str("weak"),
            Classification::NotRobust => f.write_str("not-robust"),
        }
    }
}

/// Per-agent cumulative reward deltas (attacked minus honest, pseudo-identities
/// folded into the attacker) and the resulting classification.
#[derive(Clone, Debug)]
pub struct RobustnessVerdict {
    pub deltas: Vec<(AgentId, f64)>,
    pub attacker: AgentId,
    pub attacker_delta: f64,
    pub classification: Classification,
    pub tolerance: f64,
}

impl RobustnessVerdict {
    fn classify(deltas: &[(AgentId, f64)], attacker: &AgentId, tolerance: f64) -> Classification {
        let attacker_delta = deltas
            .iter()
            .find(|(a, _)| a == attacker)
            .map(|(_, d)| *d)
            .unwrap_or(0.0);
        if attacker_delta > tolerance {
            Classification::NotRobust
        } else if deltas.iter().all(|(_, d)| d.abs() <= tolerance) {
            Classification::Strict
        } else {
            Classification::Weak
        }
    }
}

/// Honest and attacked runs plus the verdict.
#[derive(Clone, Debug)]
pub struct ScenarioReport {
    pub honest: MarketRun,
    pub attacked: MarketRun,
    pub verdict: RobustnessVerdict,
}

/// Reward shares of cumulative revenue with pseudo-identities folded into the
/// attacker.
pub fn folded_reward_shares(run: &MarketRun, scenario: &AttackScenario) -> Vec<(AgentId, f64)> {
    let revenue = run.summary.cumulative_revenue;
    folded_rewards(run, scenario)
        .into_iter()
        .map(|(a, r)| (a, if revenue > 0.0 { r / revenue } else { 0.0 }))
        .collect()
}

/// Cumulative rewards with replicate pseudo-identities folded into the
/// attacker; agents in honest market order.
fn folded_rewards(run: &MarketRun, scenario: &AttackScenario) -> Vec<(AgentId, f64)> {
    let pseudo = scenario.pseudo_ids();
    let mut folded: Vec<(AgentId, f64)> = Vec::new();
    for (agent, reward) in &run.summary.cumulative_rewards {
        let canonical = if pseudo.contains(agent) {
            scenario.attacker.clone()
        } else {
            agent.clone()
        };
        match folded.iter_mut().find(|(a, _)| *a == canonical) {
            Some((_, r)) => *r += reward,
            None => folded.push((canonical, *reward)),
        }
    }
    folded
}

/// Run the market honestly and under the attack with identical seeds and
/// windows, then classify the per-agent cumulative reward deltas.
pub fn evaluate_robustness(
    task: &MarketTask,
    data: &MarketData,
    scenario: &AttackScenario,
    tolerance: f64,
) -> Result<ScenarioReport> {
    if !tolerance.is_finite() || tolerance < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be nonnegative, got {tolerance}"
        )));
    }
    let honest = run_market(task, data)?;
    let attacked_data = apply_attack(data, scenario, task.seed ^ 0xA77A_C4ED)?;
    let attacked_task = extend_task(task, data, scenario)?;
    let attacked = run_market(&attacked_task, &attacked_data)?;

    let honest_rewards = &honest.summary.cumulative_rewards;
    let attacked_rewards = folded_rewards(&attacked, scenario);
    let deltas: Vec<(AgentId, f64)> = honest_rewards
        .iter()
        .map(|(agent, honest_r)| {
            let attacked_r = attacked_rewards
                .iter()
                .find(|(a, _)| a == agent)
                .map(|(_, r)| *r)
                .unwrap_or(0.0);
            (agent.clone(), attacked_r - honest_r)
        })
        .collect();
    let classification = RobustnessVerdict::classify(&deltas, &scenario.attacker, tolerance);
    let attacker_delta = deltas
        .iter()
        .find(|(a, _)| a == &scenario.attacker)
        .map(|(_, d)| *d)
        .unwrap_or(0.0);
    Ok(ScenarioReport {
        honest,
        attacked,
        verdict: RobustnessVerdict {
            deltas,
            attacker: scenario.attacker.clone(),
            attacker_delta,
            classification,
            tolerance,
        },
    })
}

/// Extend a task for the attacked data: with online inference nothing changes;
/// with fixed models the posterior gains zero coefficients for the replicates
/// and the feature model gains the replicate rows/columns of the population
/// law (a replicate shares its source's moments plus its own noise variance).
fn extend_task(task: &MarketTask, data: &MarketData, scenario: &AttackScenario) -> Result<MarketTask> {
    let mut out = task.clone();
    if let InferenceMode::Fixed(models) = &task.inference {
        out.inference = InferenceMode::Fixed(Box::new(extend_fixed_models(
            models, data, scenario,
        )?));
    }
    Ok(out)
}

fn extend_fixed_models(
    models: &FixedModels,
    data: &MarketData,
    scenario: &AttackScenario,
) -> Result<FixedModels> {
    let n = data.num_features();
    let extra = scenario.total_replicates();
    if extra == 0 {
        return Ok(models.clone());
    }
    // Sources of the appended columns, in apply_attack order.
    let sources: Vec<usize> = scenario
        .replicate_plan
        .iter()
        .flat_map(|&(feature, count)| std::iter::repeat_n(feature, count))
        .collect();

    // Posterior: zero weight on every replicate, with a stiff prior so the
    // plug-in mean is a point mass at zero.
    let old_mean = models.full.mean();
    let old_precision = models.full.precision();
    let dim = old_mean.len();
    let mut mean = DVector::zeros(dim + extra);
    mean.rows_mut(0, dim).copy_from(old_mean);
    let mut precision = DMatrix::zeros(dim + extra, dim + extra);
    precision
        .view_mut((0, 0), (dim, dim))
        .copy_from(old_precision);
    let stiff = old_precision.diagonal().max().max(1.0) * 1e6;
    for k in 0..extra {
        precision[(dim + k, dim + k)] = stiff;
    }
    let full = PosteriorState::from_mean_precision(mean, precision, models.full.has_intercept())?;

    // Feature model: replicate columns share the source's mean and
    // covariances; their own variance adds the replicate noise.
    let s2 = scenario.replicate_noise_std * scenario.replicate_noise_std;
    let old_cov = models.feature_model.covariance();
    let old_fm_mean = models.feature_model.mean();
    let total = n + extra;
    let col_source = |j: usize| -> usize {
        if j < n {
            j
        } else {
            sources[j - n]
        }
    };
    let fm_mean = DVector::from_fn(total, |j, _| old_fm_mean[col_source(j)]);
    let cov = DMatrix::from_fn(total, total, |i, j| {
        let base = old_cov[(col_source(i), col_source(j))];
        // distinct replicates of the same source share the source variance;
        // a replicate adds its own noise on the diagonal only
        if i == j && i >= n {
            base + s2
        } else {
            base
        }
    });
    let mut fm = FeatureModel::from_moments(fm_mean, cov)?;
    let bg = models.feature_model.background();
    if bg.nrows() > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xBAC6_0FF5);
        let rows = bg.nrows();
        let extended = DMatrix::from_fn(rows, total, |i, j| {
            if j < n {
                bg[(i, j)]
            } else {
                let noise = if s2 > 0.0 {
                    Normal::new(0.0, scenario.replicate_noise_std)
                        .expect("positive std")
                        .sample(&mut rng)
                } else {
                    0.0
                };
                bg[(i, col_source(j))] + noise
            }
        });
        fm = fm.with_background(extended)?;
    }
    Ok(FixedModels {
        full,
        central: models.central.clone(),
        feature_model: fm,
    })
}

/// Allocation policies compared in the replication sweep. Robust-Shapley and
/// the Banzhaf value run on the observational lift, matching the proposals
/// they reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveMethod {
    ObservationalShapley,
    InterventionalShapley,
    RobustShapley,
    Banzhaf,
}

impl CurveMethod {
    pub const ALL: [CurveMethod; 4] = [
        CurveMethod::ObservationalShapley,
        CurveMethod::InterventionalShapley,
        CurveMethod::RobustShapley,
        CurveMethod::Banzhaf,
    ];

    fn conditioning(self) -> Conditioning {
        match self {
            CurveMethod::InterventionalShapley => Conditioning::Interventional,
            _ => Conditioning::Observational,
        }
    }
}

impl std::fmt::Display for CurveMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveMethod::ObservationalShapley => f.write_str("observational-shapley"),
            CurveMethod::InterventionalShapley => f.write_str("interventional-shapley"),
            CurveMethod::RobustShapley => f.write_str("robust-shapley"),
            CurveMethod::Banzhaf => f.write_str("banzhaf"),
        }
    }
}

/// One row of the replication sweep: an agent's reward share at replication
/// level `k` under one method, with the per-`k` classification.
#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub method: CurveMethod,
    pub k: usize,
    pub agent: AgentId,
    pub reward_share: f64,
    pub classification: Classification,
}

/// Share table of the replication sweep, for convenient per-method access.
#[derive(Clone, Debug)]
pub struct ReplicationCurve {
    pub points: Vec<CurvePoint>,
    pub attacker: AgentId,
}

impl ReplicationCurve {
    /// Attacker share per K for one method, indexed by K.
    pub fn attacker_shares(&self, method: CurveMethod) -> Vec<f64> {
        let mut shares: Vec<(usize, f64)> = self
            .points
            .iter()
            .filter(|p| p.method == method && p.agent == self.attacker)
            .map(|p| (p.k, p.reward_share))
            .collect();
        shares.sort_by_key(|(k, _)| *k);
        shares.into_iter().map(|(_, s)| s).collect()
    }

    pub fn shares_of(&self, method: CurveMethod, agent: &AgentId) -> Vec<f64> {
        let mut shares: Vec<(usize, f64)> = self
            .points
            .iter()
            .filter(|p| p.method == method && &p.agent == agent)
            .map(|p| (p.k, p.reward_share))
            .collect();
        shares.sort_by_key(|(k, _)| *k);
        shares.into_iter().map(|(_, s)| s).collect()
    }
}

/// Sweep K = 0..=k_max for each allocation policy, replicating every feature
/// of the attacker K times with the given noise. Shares are cumulative reward
/// over cumulative revenue with pseudo-identities folded into the attacker;
/// classifications compare each attacked run against the method's honest run
/// at the closed-form tolerance tier (1e-6). Runs on estimated posteriors
/// should classify through [`replication_curve_with_tolerance`] at a
/// finite-sample tolerance instead.
pub fn replication_curve(
    task: &MarketTask,
    data: &MarketData,
    attacker: &AgentId,
    k_max: usize,
    replicate_noise_std: f64,
) -> Result<ReplicationCurve> {
    replication_curve_with_tolerance(task, data, attacker, k_max, replicate_noise_std, 1e-6)
}

pub fn replication_curve_with_tolerance(
    task: &MarketTask,
    data: &MarketData,
    attacker: &AgentId,
    k_max: usize,
    replicate_noise_std: f64,
    tolerance: f64,
) -> Result<ReplicationCurve> {
    if k_max < 1 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    let (gamma, similarity) = match task.allocation {
        AllocationMethod::RobustShapley { gamma, similarity } => (gamma, similarity),
        _ => (1.0, crate::allocation::Similarity::Pearson),
    };
    let mut points = Vec::new();
    for method in CurveMethod::ALL {
        let mut method_task = task.clone();
        method_task.lift.conditioning = method.conditioning();
        method_task.allocation = match method {
            CurveMethod::ObservationalShapley | CurveMethod::InterventionalShapley => {
                AllocationMethod::ShapleyExact
            }
            CurveMethod::RobustShapley => AllocationMethod::RobustShapley { gamma, similarity },
            CurveMethod::Banzhaf => AllocationMethod::Banzhaf,
        };
        let honest = run_market(&method_task, data)?;
        let honest_revenue = honest.summary.cumulative_revenue;
        for (agent, reward) in &honest.summary.cumulative_rewards {
            points.push(CurvePoint {
                method,
                k: 0,
                agent: agent.clone(),
                reward_share: if honest_revenue > 0.0 {
                    reward / honest_revenue
                } else {
                    0.0
                },
                classification: Classification::Strict,
            });
        }
        for k in 1..=k_max {
            let scenario =
                AttackScenario::replicate_all(attacker.clone(), data, k, replicate_noise_std)?;
            let attacked_data = apply_attack(data, &scenario, method_task.seed ^ 0xA77A_C4ED)?;
            let attacked_task = extend_task(&method_task, data, &scenario)?;
            let attacked = run_market(&attacked_task, &attacked_data)?;
            let folded = folded_rewards(&attacked, &scenario);
            let deltas: Vec<(AgentId, f64)> = honest
                .summary
                .cumulative_rewards
                .iter()
                .map(|(agent, honest_r)| {
                    let attacked_r = folded
                        .iter()
                        .find(|(a, _)| a == agent)
                        .map(|(_, r)| *r)
                        .unwrap_or(0.0);
                    (agent.clone(), attacked_r - honest_r)
                })
                .collect();
            let classification = RobustnessVerdict::classify(&deltas, attacker, tolerance);
            let revenue = attacked.summary.cumulative_revenue;
            for (agent, reward) in folded {
                points.push(CurvePoint {
                    method,
                    k,
                    agent,
                    reward_share: if revenue > 0.0 { reward / revenue } else { 0.0 },
                    classification,
                });
            }
        }
    }
    Ok(ReplicationCurve {
        points,
        attacker: attacker.clone(),
    })
}

/// CSV export shared by verdicts and sweeps: columns
/// `method,K,agent,reward_share,classification`.
pub fn write_curve_csv<W: Write>(curve: &ReplicationCurve, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "K", "agent", "reward_share", "classification"])?;
    for p in &curve.points {
        w.write_record([
            p.method.to_string(),
            p.k.to_string(),
            p.agent.to_string(),
            p.reward_share.to_string(),
            p.classification.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Verdict export in the same schema, one row per agent at the scenario's K.
pub fn write_verdict_csv<W: Write>(
    report: &ScenarioReport,
    scenario: &AttackScenario,
    method: CurveMethod,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "K", "agent", "reward_share", "classification"])?;
    let k: usize = scenario.replicate_plan.iter().map(|(_, c)| c).sum();
    let revenue = report.attacked.summary.cumulative_revenue;
    for (agent, reward) in folded_rewards(&report.attacked, scenario) {
        let share = if revenue > 0.0 { reward / revenue } else { 0.0 };
        w.write_record([
            method.to_string(),
            k.to_string(),
            agent.to_string(),
            share.to_string(),
            report.verdict.classification.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_confounded, SyntheticSpec};

    fn confounded(t: usize) -> MarketData {
        let spec = SyntheticSpec {
            confounder_strength: 1.0,
            true_weights: vec![0.5, 0.5],
            noise_std: 0.05,
            replicate_plan: vec![],
            length: t,
        };
        generate_confounded(&spec, 13).unwrap()
    }

    #[test]
    fn zero_count_plan_is_identity() {
        let data = confounded(32);
        let scenario = AttackScenario {
            attacker: AgentId::new("a2"),
            replicate_plan: vec![(1, 0)],
            replicate_noise_std: 0.1,
            spiteful: false,
        };
        let attacked = apply_attack(&data, &scenario, 1).unwrap();
        assert_eq!(attacked.num_features(), data.num_features());
    }

    #[test]
    fn replicates_register_fresh_identities() {
        let data = confounded(32);
        let scenario = AttackScenario {
            attacker: AgentId::new("a2"),
            replicate_plan: vec![(1, 4)],
            replicate_noise_std: 0.02,
            spiteful: false,
        };
        let attacked = apply_attack(&data, &scenario, 1).unwrap();
        assert_eq!(attacked.num_support(), 6);
        assert_eq!(attacked.ownership().len(), 6); // a1, a2 + 4 pseudo agents
        attacked.validate().unwrap();
        for id in scenario.pseudo_ids() {
            assert!(attacked.support_agents().any(|a| a == &id));
        }
    }

    #[test]
    fn zero_noise_gives_exact_duplicates() {
        let data = confounded(32);
        let scenario = AttackScenario {
            attacker: AgentId::new("a1"),
            replicate_plan: vec![(0, 1)],
            replicate_noise_std: 0.0,
            spiteful: false,
        };
        let attacked = apply_attack(&data, &scenario, 1).unwrap();
        assert_eq!(attacked.column(2), attacked.column(0));
    }

    #[test]
    fn replicating_central_or_foreign_features_is_rejected() {
        let data = confounded(32);
        let foreign = AttackScenario {
            attacker: AgentId::new("a2"),
            replicate_plan: vec![(0, 1)], // owned by a1
            replicate_noise_std: 0.0,
            spiteful: false,
        };
        assert!(apply_attack(&data, &foreign, 1).is_err());
    }

    #[test]
    fn classification_rules() {
        let attacker = AgentId::new("a");
        let victim = AgentId::new("b");
        let tol = 1e-6;
        let strict = vec![(attacker.clone(), 0.0), (victim.clone(), 1e-9)];
        assert_eq!(
            RobustnessVerdict::classify(&strict, &attacker, tol),
            Classification::Strict
        );
        let weak = vec![(attacker.clone(), -0.01), (victim.clone(), -0.02)];
        assert_eq!(
            RobustnessVerdict::classify(&weak, &attacker, tol),
            Classification::Weak
        );
        let broken = vec![(attacker.clone(), 0.05), (victim.clone(), -0.05)];
        assert_eq!(
            RobustnessVerdict::classify(&broken, &attacker, tol),
            Classification::NotRobust
        );
    }
}

//! Experiment execution and artifact writing. Output files are written
//! atomically (temp file + rename) and are byte-identical across reruns with
//! the same config and seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use regression_markets::attack::{
    evaluate_robustness, replication_curve_with_tolerance, write_curve_csv, write_verdict_csv,
    AttackScenario, CurveMethod, ScenarioReport,
};
use regression_markets::dataset::{
    build_lags, generate_confounded, ingest_csv_with_manifest, prescreen_redundant, AgentId,
    MarketData,
};
use regression_markets::lift::Conditioning;
use regression_markets::market::{
    run_market, write_ledger_csv, InferenceMode, MarketRun, MarketTask,
};

use crate::config::{
    ExperimentConfig, MethodName, ResolvedAttack, ResolvedConfig, ResolvedData, ResolvedMarket,
    Violation,
};
use crate::CliError;

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// Paths produced by a run.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Load and validate a config without executing it.
pub fn validate_config(path: &Path) -> Result<Vec<Violation>, CliError> {
    Ok(ExperimentConfig::load(path)?.validate())
}

fn checked_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let config = ExperimentConfig::load(path)?;
    let violations = config.validate();
    if !violations.is_empty() {
        let listing: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Config(listing.join("; ")));
    }
    Ok(config)
}

fn resolve_out_dir(config: &ExperimentConfig, overrides: &Overrides) -> PathBuf {
    overrides
        .out_dir
        .clone()
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os("REGMARKET_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn build_data(config: &ExperimentConfig, seed: u64) -> Result<MarketData, CliError> {
    if let Some(synth) = &config.data.synthetic {
        return Ok(generate_confounded(&synth.to_spec(), seed)?);
    }
    let csv = config
        .data
        .csv
        .as_ref()
        .expect("validation guarantees a data source");
    let mut data = ingest_csv_with_manifest(&csv.path, &csv.manifest, &csv.target_column, csv.normalize)?;
    if csv.lag > 0 {
        data = build_lags(&data, csv.lag)?;
    }
    if let Some(threshold) = csv.prescreen_threshold {
        let (screened, _removals) = prescreen_redundant(&data, threshold)?;
        data = screened;
    }
    Ok(data)
}

fn build_task(
    config: &ExperimentConfig,
    data: &MarketData,
    seed: u64,
) -> Result<MarketTask, CliError> {
    let (train_window, test_window) = config.windows(data.rows())?;
    Ok(MarketTask {
        valuation: config.market.valuation,
        model: config.model_config(),
        lift: config.lift_spec(),
        allocation: config.allocation_method(),
        train_window,
        test_window,
        inference: InferenceMode::Online,
        in_sample_game: config.market.in_sample_game,
        seed,
    })
}

struct ResolvedScenario {
    scenario: AttackScenario,
    feature_names: Vec<String>,
    noise_std: f64,
    k_max: usize,
    tolerance: f64,
}

fn resolve_attack(
    config: &ExperimentConfig,
    data: &MarketData,
) -> Result<Option<ResolvedScenario>, CliError> {
    let Some(section) = &config.attack else {
        return Ok(None);
    };
    let attacker = AgentId::new(section.attacker.clone());
    let owned: Vec<usize> = data
        .ownership()
        .iter()
        .find(|(a, _)| a == &attacker)
        .map(|(_, idx)| idx.clone())
        .ok_or_else(|| {
            CliError::Config(format!(
                "attack.attacker: {} is not a support agent of the dataset",
                section.attacker
            ))
        })?;
    let features: Vec<usize> = match &section.features {
        None => owned.clone(),
        Some(names) => names
            .iter()
            .map(|name| {
                let idx = data.column_index(name).ok_or_else(|| {
                    CliError::Config(format!("attack.features: no column named {name:?}"))
                })?;
                if !owned.contains(&idx) {
                    return Err(CliError::Config(format!(
                        "attack.features: {name:?} is not owned by {}",
                        section.attacker
                    )));
                }
                Ok(idx)
            })
            .collect::<Result<_, CliError>>()?,
    };
    // Default replicate noise: 0.05 x the mean std of the replicated columns.
    let noise_std = match section.noise_std {
        Some(v) => v,
        None => {
            let mean_std: f64 = features
                .iter()
                .map(|&idx| {
                    let col = data.column(idx);
                    let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
                    (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / (col.len().max(2) - 1) as f64)
                        .sqrt()
                })
                .sum::<f64>()
                / features.len().max(1) as f64;
            0.05 * mean_std
        }
    };
    let feature_names = features
        .iter()
        .map(|&idx| data.feature_names()[idx].clone())
        .collect();
    Ok(Some(ResolvedScenario {
        scenario: AttackScenario {
            attacker,
            replicate_plan: features
                .into_iter()
                .map(|idx| (idx, section.replicates))
                .collect(),
            replicate_noise_std: noise_std,
            spiteful: false,
        },
        feature_names,
        noise_std,
        k_max: section.k_max,
        tolerance: section.tolerance,
    }))
}

fn curve_method_label(config: &ExperimentConfig) -> CurveMethod {
    match config.allocation.method {
        MethodName::Banzhaf => CurveMethod::Banzhaf,
        MethodName::RobustShapley => CurveMethod::RobustShapley,
        MethodName::ShapleyExact | MethodName::ShapleySampled => match config.lift.conditioning {
            Conditioning::Observational => CurveMethod::ObservationalShapley,
            Conditioning::Interventional => CurveMethod::InterventionalShapley,
        },
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn resolved_config(
    config: &ExperimentConfig,
    data: &MarketData,
    task: &MarketTask,
    attack: Option<&ResolvedScenario>,
    seed: u64,
    out_dir: &Path,
) -> ResolvedConfig {
    ResolvedConfig {
        schema_version: config.schema_version,
        seed,
        out_dir: out_dir.to_path_buf(),
        data: ResolvedData {
            csv: config.data.csv.clone(),
            synthetic: config.data.synthetic.clone(),
            rows: data.rows(),
            support_features: data.num_support(),
        },
        model: config.model.clone(),
        lift: config.lift.clone(),
        market: ResolvedMarket {
            valuation: config.market.valuation,
            train_window: [task.train_window.start, task.train_window.end],
            test_window: [task.test_window.start, task.test_window.end],
            in_sample_game: config.market.in_sample_game,
        },
        allocation: config.allocation.clone(),
        attack: attack.map(|r| ResolvedAttack {
            attacker: r.scenario.attacker.to_string(),
            features: r.feature_names.clone(),
            replicates: r.scenario.replicate_plan.first().map(|(_, k)| *k).unwrap_or(0),
            noise_std: r.noise_std,
            k_max: r.k_max,
            tolerance: r.tolerance,
        }),
    }
}

fn percent(v: Option<f64>) -> String {
    match v {
        Some(f) => format!("{:.2}%", f * 100.0),
        None => "n/a".to_string(),
    }
}

fn summary_text(
    config: &ExperimentConfig,
    data: &MarketData,
    task: &MarketTask,
    honest: &MarketRun,
    attack: Option<(&ResolvedScenario, &ScenarioReport)>,
) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line("regression market summary".into());
    line("=========================".into());
    let source = if config.data.synthetic.is_some() {
        "synthetic".to_string()
    } else {
        config
            .data
            .csv
            .as_ref()
            .map(|c| c.path.display().to_string())
            .unwrap_or_default()
    };
    line(format!(
        "data: {source} ({} rows, {} support features, {} support agents)",
        data.rows(),
        data.num_support(),
        data.ownership().len()
    ));
    line(format!(
        "windows: train {}..{}, test {}..{}",
        task.train_window.start, task.train_window.end, task.test_window.start, task.test_window.end
    ));
    line(format!(
        "lift: {:?} / {:?}; rule: {:?}; allocation: {:?}; lambda: {}; seed: {}",
        config.lift.conditioning,
        config.lift.backend,
        config.lift.rule,
        config.allocation.method,
        config.market.valuation,
        task.seed
    ));
    line(String::new());
    line(format!(
        "in-sample improvement:     {}",
        percent(honest.summary.in_sample_improvement)
    ));
    line(format!(
        "out-of-sample improvement: {}",
        percent(honest.summary.out_of_sample_improvement)
    ));
    line(format!(
        "cumulative revenue:        {:.6}",
        honest.summary.cumulative_revenue
    ));
    line(String::new());
    line("cumulative rewards (honest run):".into());
    for (agent, reward) in &honest.summary.cumulative_rewards {
        let share = if honest.summary.cumulative_revenue > 0.0 {
            reward / honest.summary.cumulative_revenue * 100.0
        } else {
            0.0
        };
        line(format!("  {agent:<12} {reward:>12.6}  ({share:.1}%)"));
    }
    line(String::new());
    line("expected allocation (final tracked value per support feature):".into());
    for (idx, phi) in &honest.summary.expected_allocation {
        line(format!(
            "  {:<12} {phi:>10.6}",
            data.feature_names()[*idx]
        ));
    }
    if let Some((resolved, report)) = attack {
        line(String::new());
        line(format!(
            "attack: {} replicates {:?} x{} with noise std {:.6}",
            resolved.scenario.attacker,
            resolved.feature_names,
            resolved
                .scenario
                .replicate_plan
                .first()
                .map(|(_, k)| *k)
                .unwrap_or(0),
            resolved.noise_std
        ));
        line(format!(
            "classification: {} (tolerance {:.1e})",
            report.verdict.classification, report.verdict.tolerance
        ));
        line("reward deltas (attacked - honest):".into());
        for (agent, delta) in &report.verdict.deltas {
            line(format!("  {agent:<12} {delta:>+12.6}"));
        }
        line(format!(
            "attacked improvements: in-sample {}, out-of-sample {}",
            percent(report.attacked.summary.in_sample_improvement),
            percent(report.attacked.summary.out_of_sample_improvement)
        ));
    }
    out
}

/// Execute `run <config>`: honest market, optional attack scenario, ledgers,
/// verdict and summary.
pub fn run_experiment(path: &Path, overrides: &Overrides) -> Result<Artifacts, CliError> {
    let config = checked_config(path)?;
    let seed = overrides.seed.unwrap_or(config.seed);
    let out_dir = resolve_out_dir(&config, overrides);
    std::fs::create_dir_all(&out_dir)?;

    let data = build_data(&config, seed)?;
    let task = build_task(&config, &data, seed)?;
    let attack = resolve_attack(&config, &data)?;

    let mut files = Vec::new();
    let honest = run_market(&task, &data)?;
    let honest_path = out_dir.join("ledger_honest.csv");
    let mut buf = Vec::new();
    write_ledger_csv(&honest, &mut buf)?;
    write_atomic(&honest_path, &buf)?;
    files.push(honest_path);

    let report = match &attack {
        Some(resolved) => {
            let report = evaluate_robustness(&task, &data, &resolved.scenario, resolved.tolerance)?;
            let attacked_path = out_dir.join("ledger_attacked.csv");
            let mut buf = Vec::new();
            write_ledger_csv(&report.attacked, &mut buf)?;
            write_atomic(&attacked_path, &buf)?;
            files.push(attacked_path);

            let verdict_path = out_dir.join("verdict.csv");
            let mut buf = Vec::new();
            write_verdict_csv(&report, &resolved.scenario, curve_method_label(&config), &mut buf)?;
            write_atomic(&verdict_path, &buf)?;
            files.push(verdict_path);
            Some(report)
        }
        None => None,
    };

    let summary_path = out_dir.join("summary.txt");
    let text = summary_text(
        &config,
        &data,
        &task,
        &honest,
        attack.as_ref().zip(report.as_ref()),
    );
    write_atomic(&summary_path, text.as_bytes())?;
    files.push(summary_path);

    let resolved = resolved_config(&config, &data, &task, attack.as_ref(), seed, &out_dir);
    let provenance_path = out_dir.join("resolved_config.toml");
    let toml_text = toml::to_string_pretty(&resolved)
        .map_err(|e| CliError::Config(format!("cannot serialize resolved config: {e}")))?;
    write_atomic(&provenance_path, toml_text.as_bytes())?;
    files.push(provenance_path);

    Ok(Artifacts { out_dir, files })
}

/// Execute `curve <config>`: the replication sweep across all four allocation
/// policies.
pub fn run_replication_sweep(path: &Path, overrides: &Overrides) -> Result<Artifacts, CliError> {
    let config = checked_config(path)?;
    let seed = overrides.seed.unwrap_or(config.seed);
    let out_dir = resolve_out_dir(&config, overrides);
    std::fs::create_dir_all(&out_dir)?;

    let data = build_data(&config, seed)?;
    let task = build_task(&config, &data, seed)?;
    let attack = resolve_attack(&config, &data)?.ok_or_else(|| {
        CliError::Config("curve requires an [attack] section naming the attacker".into())
    })?;

    let curve = replication_curve_with_tolerance(
        &task,
        &data,
        &attack.scenario.attacker,
        attack.k_max,
        attack.noise_std,
        attack.tolerance,
    )?;
    let mut files = Vec::new();
    let curve_path = out_dir.join("curve.csv");
    let mut buf = Vec::new();
    write_curve_csv(&curve, &mut buf)?;
    write_atomic(&curve_path, &buf)?;
    files.push(curve_path);

    let resolved = resolved_config(&config, &data, &task, Some(&attack), seed, &out_dir);
    let provenance_path = out_dir.join("resolved_config.toml");
    let toml_text = toml::to_string_pretty(&resolved)
        .map_err(|e| CliError::Config(format!("cannot serialize resolved config: {e}")))?;
    write_atomic(&provenance_path, toml_text.as_bytes())?;
    files.push(provenance_path);

    Ok(Artifacts { out_dir, files })
}

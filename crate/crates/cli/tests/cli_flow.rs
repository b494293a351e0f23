//! End-to-end checks of the experiment runner: artifact layout, byte-identical
//! reruns, validation reports, and the binary's exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

use regmarket::{run_experiment, run_replication_sweep, validate_config, Overrides};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn overrides(dir: &Path) -> Overrides {
    Overrides {
        seed: None,
        out_dir: Some(dir.to_path_buf()),
    }
}

#[test]
fn valid_configs_pass_validation() {
    for name in ["replication_demo.toml", "honest_only.toml", "wind_small.toml"] {
        let violations = validate_config(&fixture(name)).unwrap();
        assert!(violations.is_empty(), "{name}: {violations:?}");
    }
}

#[test]
fn invalid_config_lists_field_paths() {
    let violations = validate_config(&fixture("invalid.toml")).unwrap();
    let fields: Vec<&str> = violations.iter().map(|v| v.field.as_str()).collect();
    assert!(fields.contains(&"model.forgetting"), "{fields:?}");
    assert!(fields.contains(&"market.valuation"), "{fields:?}");
}

#[test]
fn run_without_attack_emits_honest_artifacts_only() {
    let dir = tempfile::tempdir().unwrap();
    let artifacts = run_experiment(&fixture("honest_only.toml"), &overrides(dir.path())).unwrap();
    let names: Vec<String> = artifacts
        .files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"ledger_honest.csv".to_string()));
    assert!(names.contains(&"summary.txt".to_string()));
    assert!(names.contains(&"resolved_config.toml".to_string()));
    assert!(!names.iter().any(|n| n == "verdict.csv"));
    assert!(!names.iter().any(|n| n == "ledger_attacked.csv"));

    // defaults recorded for provenance
    let resolved = std::fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap();
    let parsed: toml::Value = toml::from_str(&resolved).unwrap();
    assert_eq!(parsed["model"]["prior_precision"].as_float(), Some(1.0));
    assert_eq!(parsed["lift"]["mc_samples"].as_integer(), Some(1000));
    let train: Vec<i64> = parsed["market"]["train_window"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_integer().unwrap())
        .collect();
    assert_eq!(train, vec![0, 300]);
}

#[test]
fn replication_demo_reproduces_the_two_thirds_split() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&fixture("replication_demo.toml"), &overrides(dir.path())).unwrap();
    let verdict = std::fs::read_to_string(dir.path().join("verdict.csv")).unwrap();
    let mut attacker_share = None;
    let mut victim_share = None;
    for line in verdict.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[4], "not-robust");
        match cols[2] {
            "a2" => attacker_share = Some(cols[3].parse::<f64>().unwrap()),
            "a1" => victim_share = Some(cols[3].parse::<f64>().unwrap()),
            other => panic!("unexpected agent {other}"),
        }
    }
    let attacker_share = attacker_share.unwrap();
    let victim_share = victim_share.unwrap();
    assert!(
        (attacker_share - 2.0 / 3.0).abs() <= 0.04,
        "attacker share {attacker_share}"
    );
    assert!(
        (victim_share - 1.0 / 3.0).abs() <= 0.04,
        "victim share {victim_share}"
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_experiment(&fixture("replication_demo.toml"), &overrides(dir_a.path())).unwrap();
    run_experiment(&fixture("replication_demo.toml"), &overrides(dir_b.path())).unwrap();
    for name in [
        "ledger_honest.csv",
        "ledger_attacked.csv",
        "verdict.csv",
        "summary.txt",
    ] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
    // a different seed must change the ledgers
    let dir_c = tempfile::tempdir().unwrap();
    run_experiment(
        &fixture("replication_demo.toml"),
        &Overrides {
            seed: Some(43),
            out_dir: Some(dir_c.path().to_path_buf()),
        },
    )
    .unwrap();
    let a = std::fs::read(dir_a.path().join("ledger_honest.csv")).unwrap();
    let c = std::fs::read(dir_c.path().join("ledger_honest.csv")).unwrap();
    assert_ne!(a, c, "seed override had no effect");
}

#[test]
fn curve_emits_all_methods() {
    let dir = tempfile::tempdir().unwrap();
    run_replication_sweep(&fixture("replication_demo.toml"), &overrides(dir.path())).unwrap();
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "method,K,agent,reward_share,classification");
    let body: Vec<&str> = lines.collect();
    for method in [
        "observational-shapley",
        "interventional-shapley",
        "robust-shapley",
        "banzhaf",
    ] {
        let rows = body
            .iter()
            .filter(|l| l.starts_with(&format!("{method},")))
            .count();
        // K = 0..=3, two honest agents per K plus pseudo-agents folded away
        assert!(rows >= 8, "{method}: only {rows} rows");
    }
    // With online-trained posteriors the replicate weights are only
    // approximately zero, so the interventional column may wobble at the
    // finite-sample scale while the observational column grows structurally.
    let shares = |method: &str| -> Vec<f64> {
        body.iter()
            .filter(|l| l.starts_with(&format!("{method},")) && l.contains(",a2,"))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect()
    };
    let int_attacker = shares("interventional-shapley");
    let obs_attacker = shares("observational-shapley");
    assert_eq!(int_attacker.len(), 4);
    let int_drift = int_attacker
        .iter()
        .map(|s| (s - int_attacker[0]).abs())
        .fold(0.0f64, f64::max);
    let obs_drift = obs_attacker[3] - obs_attacker[0];
    assert!(int_drift <= 0.05, "interventional drift {int_drift} ({int_attacker:?})");
    assert!(obs_drift >= 0.15, "observational growth {obs_drift} ({obs_attacker:?})");
    assert!(int_drift < obs_drift / 3.0);
}

#[test]
fn curve_without_attack_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_replication_sweep(&fixture("honest_only.toml"), &overrides(dir.path()))
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn csv_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let artifacts = run_experiment(&fixture("wind_small.toml"), &overrides(dir.path())).unwrap();
    assert!(artifacts.files.iter().any(|p| p.ends_with("ledger_honest.csv")));
    let ledger = std::fs::read_to_string(dir.path().join("ledger_honest.csv")).unwrap();
    let header = ledger.lines().next().unwrap();
    assert_eq!(
        header,
        "t,timestamp,stage,revenue,loss_base,loss_full,reward_a2,reward_a3"
    );
    // 96 rows, 1 lag dropped -> 95 market steps
    assert_eq!(ledger.lines().count() - 1, 95);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_regmarket");
    let crate_dir = env!("CARGO_MANIFEST_DIR");

    let ok = Command::new(bin)
        .current_dir(crate_dir)
        .args(["validate", "tests/fixtures/honest_only.toml"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{ok:?}");

    let invalid = Command::new(bin)
        .current_dir(crate_dir)
        .args(["validate", "tests/fixtures/invalid.toml"])
        .output()
        .unwrap();
    assert_eq!(invalid.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&invalid.stdout);
    assert!(stdout.contains("model.forgetting"), "{stdout}");

    let missing = Command::new(bin)
        .current_dir(crate_dir)
        .args(["run", "tests/fixtures/does_not_exist.toml"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let run = Command::new(bin)
        .current_dir(crate_dir)
        .args([
            "run",
            "tests/fixtures/honest_only.toml",
            "--out-dir",
        ])
        .arg(dir.path())
        .args(["--threads", "2"])
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{run:?}");
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn env_var_provides_default_out_dir() {
    let bin = env!("CARGO_BIN_EXE_regmarket");
    let crate_dir = env!("CARGO_MANIFEST_DIR");
    let dir = tempfile::tempdir().unwrap();
    let run = Command::new(bin)
        .current_dir(crate_dir)
        .env("REGMARKET_OUT_DIR", dir.path())
        .args(["run", "tests/fixtures/honest_only.toml"])
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert!(dir.path().join("ledger_honest.csv").exists());
}

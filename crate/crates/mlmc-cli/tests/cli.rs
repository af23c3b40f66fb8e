//! End-to-end checks of the `mlmc` binary: exit codes, report files,
//! and invariance of the numbers under the worker-thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mlmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlmc")).args(args).output().expect("binary runs")
}

fn write_cfg(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn price_cfg(eps: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "experiment": "price",
        "model": {"kind": "gbm", "x0": 1.0, "mu": 0.05, "sigma": 0.2, "horizon": 1.0},
        "payoff": {"name": "call", "strike": 1.0},
        "eps": eps,
        "mlmc": {"pilot": 500, "max_level": 12},
        "seed": 21
    })
}

fn stripped_report(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("report.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for record in v.as_array_mut().unwrap() {
        record.as_object_mut().unwrap().remove("meta");
    }
    v
}

#[test]
fn validate_accepts_a_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "cfg.json", &price_cfg(serde_json::json!([0.05])));
    let out = mlmc(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));
}

#[test]
fn unknown_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = price_cfg(serde_json::json!([0.05]));
    bad["typo_field"] = serde_json::json!(true);
    let cfg = write_cfg(dir.path(), "cfg.json", &bad);
    let out = mlmc(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = mlmc(&["run", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_the_three_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "cfg.json", &price_cfg(serde_json::json!([0.05])));
    let out_dir = dir.path().join("out");
    let out = mlmc(&["run", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("price replicate 0"), "{stdout}");

    let report = stripped_report(&out_dir);
    let records = report.as_array().unwrap();
    assert_eq!(records.len(), 1);
    assert!(records[0]["value"].as_f64().unwrap() > 0.0);
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out_dir.join("levels.csv").exists());
}

#[test]
fn reruns_and_thread_counts_leave_the_numbers_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "cfg.json", &price_cfg(serde_json::json!([0.05])));
    let mut reports = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let out_dir = dir.path().join(name);
        let out = mlmc(&[
            "run",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(stripped_report(&out_dir));
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);
}

#[test]
fn seed_override_changes_the_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "cfg.json", &price_cfg(serde_json::json!([0.05])));
    let a_dir = dir.path().join("a");
    let b_dir = dir.path().join("b");
    mlmc(&["run", cfg.to_str().unwrap(), "--out", a_dir.to_str().unwrap()]);
    mlmc(&["run", cfg.to_str().unwrap(), "--seed", "99", "--out", b_dir.to_str().unwrap()]);
    let a = stripped_report(&a_dir);
    let b = stripped_report(&b_dir);
    assert_ne!(a[0]["value"], b[0]["value"]);
}

#[test]
fn sweep_fits_a_cost_slope() {
    let dir = tempfile::tempdir().unwrap();
    // Accuracies tight enough that the sample allocation, not the pilot,
    // sets the cost at every point of the sweep.
    let mut sweep = price_cfg(serde_json::json!([0.008, 0.004, 0.002]));
    sweep["mlmc"]["pilot"] = serde_json::json!(100);
    let cfg = write_cfg(dir.path(), "cfg.json", &sweep);
    let out = mlmc(&["sweep", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cost slope: -"), "{stdout}");
}

#[test]
fn impossible_quantile_bracket_is_an_algorithmic_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "cfg.json",
        &serde_json::json!({
            "experiment": "risk_var_cvar",
            "eps": [0.05],
            "seed": 5,
            "risk": {"threshold": 0.0, "quantile": 0.9999}
        }),
    );
    let out = mlmc(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bracket"));
}

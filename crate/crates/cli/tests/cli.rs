//! End-to-end smoke tests for the `tbm` binary: each subcommand on a
//! small two-zone scenario, plus the exit-code contract on bad input.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tbm_core::io::{save_scenario, ScenarioConfig, TensionEvent, SCHEMA_VERSION};
use tbm_core::{AdaptConfig, Bounds, PlantParams, SoftBand, Weights};

fn tbm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tbm"))
}

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        seed: 7,
        duration_s: 0.2,
        controller: "atbm".to_string(),
        horizon: 8,
        max_outer_iterations: 30,
        plant: PlantParams::default_line(2),
        adapt: AdaptConfig::default(),
        weights: Weights::default_line(2),
        bounds: Bounds::default(),
        soft_band: SoftBand::default(),
        initial_tensions: vec![30.0, 30.0],
        tension_events: vec![TensionEvent {
            time_s: 0.1,
            span: 1,
            value: 36.0,
        }],
        initial_upstream: 0.01,
        upstream_events: vec![],
    }
}

fn write_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("scenario.json");
    save_scenario(&small_scenario(), &path).unwrap();
    path
}

fn assert_code(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn run_atbm_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let out = dir.path().join("out");
    let output = tbm()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .args(["--controller", "atbm", "--out"])
        .arg(&out)
        .arg("--monitors")
        .output()
        .unwrap();
    assert_code(&output, 0);
    for artifact in ["trace.csv", "metrics.json", "bound_report.json", "monitors.json"] {
        assert!(out.join(artifact).is_file(), "missing {artifact}");
    }
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    // header plus one row per applied control step
    assert_eq!(trace.lines().count(), 1 + 20);
}

#[test]
fn run_lqr_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let out = dir.path().join("out");
    let output = tbm()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .args(["--controller", "lqr", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_code(&output, 0);
    assert!(out.join("trace.csv").is_file());
}

#[test]
fn report_recomputes_metrics_from_trace() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let out = dir.path().join("out");
    let run = tbm()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .args(["--controller", "atbm", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_code(&run, 0);
    let report = tbm()
        .args(["report", "--trace"])
        .arg(out.join("trace.csv"))
        .args(["--scenario"])
        .arg(&scenario)
        .output()
        .unwrap();
    assert_code(&report, 0);
    let stdout = String::from_utf8_lossy(&report.stdout);
    assert!(stdout.contains("aggregate_tension_rmse"), "stdout:\n{stdout}");
    assert!(stdout.contains("settling_times"), "stdout:\n{stdout}");

    // without the scenario file the report falls back to defaults
    let bare = tbm()
        .args(["report", "--trace"])
        .arg(out.join("trace.csv"))
        .output()
        .unwrap();
    assert_code(&bare, 0);
}

#[test]
fn bounds_prints_complexity_report() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let output = tbm()
        .args(["bounds", "--scenario"])
        .arg(&scenario)
        .output()
        .unwrap();
    assert_code(&output, 0);
    let stdout = String::from_utf8_lossy(&output.stdout);
    for field in ["l_phi", "delta_bar", "k_feas"] {
        assert!(stdout.contains(field), "missing {field} in:\n{stdout}");
    }
}

#[test]
fn verify_small_campaign_passes() {
    let output = tbm()
        .args(["verify", "--instances", "5", "--seed", "2024"])
        .output()
        .unwrap();
    assert_code(&output, 0);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("all checks passed"), "stdout:\n{stdout}");
}

#[test]
fn invalid_scenario_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_scenario();
    config.initial_tensions = vec![30.0]; // wrong length for n = 2
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let output = tbm()
        .args(["run", "--scenario"])
        .arg(&path)
        .args(["--controller", "atbm", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_code(&output, 2);
}

#[test]
fn unknown_controller_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let output = tbm()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .args(["--controller", "mppi", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_code(&output, 2);
}

#[test]
fn missing_scenario_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let output = tbm()
        .args(["bounds", "--scenario"])
        .arg(dir.path().join("nope.json"))
        .output()
        .unwrap();
    assert_code(&output, 2);
}

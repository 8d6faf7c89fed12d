//! The `cupid` binary: exit codes, error lines, and output files.

mod common;

use common::cli::{cupid, tiny, write_config};
use cupid_core::harness::{Task, GRID_POINTS};

fn error_kind(stderr: &[u8]) -> String {
    let line = String::from_utf8_lossy(stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim()).expect("stderr is one JSON line");
    assert!(v["error"]["message"].is_string());
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_machine_readable_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.json");
    let r = cupid(&["run", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_kind(&r.stderr), "io");
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Task::Toy1);
    cfg.insertion_layer = 7;
    let path = dir.path().join("bad.json");
    write_config(&path, &cfg);
    let r = cupid(&["train-base", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_kind(&r.stderr), "invalid_argument");
    assert!(!dir.path().join("base.json").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let r = cupid(&["sweep", "--task", "toy1"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_kind(&r.stderr), "usage");
    let r = cupid(&["run", "--task", "toy9"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn checkpoint_for_another_model_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (toy, ood) = (dir.path().join("toy.json"), dir.path().join("ood.json"));
    write_config(&toy, &tiny(Task::Toy1));
    write_config(&ood, &tiny(Task::Ood));
    let out = dir.path().join("out");
    let r = cupid(&["train-base", "--config", toy.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    let base = out.join("base.json");
    let r = cupid(&["eval", "--config", ood.to_str().unwrap(), "--base", base.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_kind(&r.stderr), "invalid_argument");
}

#[test]
fn plot_grid_has_every_point_and_nonnegative_uncertainty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("toy2.json");
    write_config(&cfg_path, &tiny(Task::Toy2));
    let out = dir.path().join("plot");
    let r = cupid(&["plot-data", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let mut reader = csv::Reader::from_path(out.join("grid.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["x", "y_hat", "u_alea", "u_epis"]);
    let rows: Vec<Vec<f64>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), GRID_POINTS);
    assert_eq!(rows.len(), 1001);
    assert!((rows[0][0] - 4.5).abs() < 1e-12 && (rows[1000][0] - 14.5).abs() < 1e-9);
    assert!(rows.iter().all(|r| r[2] >= 0.0 && r[3] >= 0.0));
}

#[test]
fn plot_data_needs_a_toy_task() {
    let dir = tempfile::tempdir().unwrap();
    let r = cupid(&["plot-data", "--task", "ood", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_kind(&r.stderr), "invalid_argument");
}

#[test]
fn run_writes_records_metrics_summary_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("misclass.json");
    write_config(&cfg_path, &tiny(Task::Misclass));
    let out = dir.path().join("run");
    let r = cupid(&["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["records_seed0.csv", "records_seed1.csv", "metrics.csv", "summary.csv", "report.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("seed,score_type,metric,value,n,params\n"));
    let records = std::fs::read_to_string(out.join("records_seed0.csv")).unwrap();
    assert!(records.starts_with("input_id,set,is_ood,u_alea,u_epis,error,y_hat_0,"));
}

#[test]
fn shipped_configs_match_presets() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for task in [Task::Toy1, Task::Toy2, Task::Tabular, Task::Misclass, Task::Ood] {
        let name = serde_json::to_value(task).unwrap();
        let path = dir.join(format!("{}.json", name.as_str().unwrap()));
        let cfg = cupid_core::harness::ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, cupid_core::harness::ExperimentConfig::preset(task), "{}", path.display());
    }
}

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const DEMO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../demo/four_branches.json");

const SMALL: &str = r#"{
  "spec": { "simulator_id": "vesselgrid", "width": 16, "height": 16, "cell_size_h": 1.0, "time_invariant": false },
  "params": { "simulator": "vesselgrid", "diffusion": 0.4, "vx": 0.1, "dt": 0.1, "source_cells": [17, 18], "source_amp": 1.0, "source_period": 8 },
  "seeds": { "120": 1.0 },
  "horizon": 40,
  "branches": [ { "at_step": 20, "overrides": { "diffusion": 0.8 } }, { "at_step": 20 } ],
  "reflection": { "from_step": 22, "to_step": 38 },
  "retrospection": { "at_step": 15, "overrides": { "vy": 0.3 } }
}"#;

fn branchsim(store: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_branchsim"));
    cmd.env_remove("BRANCHSIM_STORE");
    if let Some(s) = store {
        cmd.env("BRANCHSIM_STORE", s);
    }
    cmd.args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn predict_demo_reports_the_expected_ratio() {
    let out = json(&branchsim(None, &["predict", "--config", DEMO, "--workers", "2"]));
    let savings = &out["report"]["savings"];
    assert_eq!(savings["steps_linear"], 800);
    assert_eq!(savings["steps_branching"], 440);
    assert_eq!(savings["ratio"], 0.55);
    assert_eq!(out["branches"].as_array().unwrap().len(), 4);
}

#[test]
fn store_workflow_reflect_retrospect_report() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let cfg = write_config(dir.path(), "small.json", SMALL);

    let out = json(&branchsim(Some(&store), &["predict", "--config", &cfg]));
    assert_eq!(out["report"]["savings"]["steps_linear"], 80);
    assert_eq!(out["report"]["savings"]["steps_branching"], 60);

    let r = json(&branchsim(Some(&store), &["reflect", "--config", &cfg, "--node", "2"]));
    assert_eq!(r["unchanged"], true);
    assert_eq!(r["original_digest"], r["reflected_digest"]);

    let r = json(&branchsim(Some(&store), &["retrospect", "--config", &cfg]));
    assert_eq!(r["at_step"], 15);
    assert_eq!(r["until_step"], 20);
    assert_eq!(r["status"], "complete");

    let report = json(&branchsim(Some(&store), &["report"]));
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
    assert!(report["savings"]["nodes"].as_array().unwrap().len() >= 4);

    let table = branchsim(Some(&store), &["report", "--format", "table"]);
    assert!(table.status.success());
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.contains("steps_linear"), "{text}");
    assert!(text.lines().next().unwrap().starts_with("node"));
}

#[test]
fn retrospect_outside_stored_lineage_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let cfg = write_config(dir.path(), "small.json", SMALL);
    json(&branchsim(Some(&store), &["predict", "--config", &cfg]));
    let late = SMALL.replace("\"at_step\": 15", "\"at_step\": 35");
    let late = write_config(dir.path(), "late.json", &late);
    let out = branchsim(Some(&store), &["retrospect", "--config", &late, "--node", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("StepNotStored"));
}

#[test]
fn config_parse_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &SMALL.replace("\"horizon\": 40,", "\"horizon\": 40"));
    let out = branchsim(None, &["predict", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 6"), "{err}");
}

#[test]
fn unstable_branch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let unstable = SMALL.replace("\"diffusion\": 0.8", "\"diffusion\": 8.0");
    let cfg = write_config(dir.path(), "unstable.json", &unstable);
    let out = branchsim(None, &["predict", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UnstableParams"));
}

#[test]
fn report_needs_a_store() {
    let out = branchsim(None, &["report"]);
    assert_eq!(out.status.code(), Some(1));
}

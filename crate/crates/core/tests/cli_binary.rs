//! The `kvqa` binary: exit codes, the one-line JSON error contract, and
//! manifests.

mod common;

use std::fs;
use std::process::Command;

use common::{build, Fixture};

fn kvqa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kvqa"))
}

#[test]
fn missing_input_is_one_json_line_and_exit_1() {
    let out = kvqa().args(["--config", "/definitely/not/here.json", "ingest"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let err: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["kind"], "missing_file");
}

#[test]
fn unscripted_prompt_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let ws = build(dir.path(), &Fixture { instances: 10, t_statements: 2, flips: vec![], grid: vec![] });
    fs::write(&ws.transcript, "").unwrap();
    let out = kvqa().args(["--config", ws.config.to_str().unwrap(), "gen-initial"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "knowledge_generation");
    assert!(err["message"].as_str().unwrap().contains("unscripted prompt"));
}

#[test]
fn ingest_reports_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ws = build(dir.path(), &Fixture { instances: 12, t_statements: 2, flips: vec![], grid: vec![] });
    let out = kvqa().args(["--config", ws.config.to_str().unwrap(), "ingest"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.work_dir.join("ingest.json")).unwrap()).unwrap();
    assert_eq!(report["dataset_name"], "synthetic_val");
    assert_eq!(report["num_instances"], 12);
    assert_eq!(report["missing_captions"].as_array().unwrap().len(), 0);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.work_dir.join("ingest.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["input_digests"].as_object().unwrap().len(), 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn fallback_backend_only_embeds() {
    let dir = tempfile::tempdir().unwrap();
    let ws = build(dir.path(), &Fixture { instances: 10, t_statements: 2, flips: vec![], grid: vec![] });
    let config = ws.config.to_str().unwrap();
    let out = kvqa().args(["--config", config, "--backend", "fallback", "gen-initial"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    assert!(kvqa().args(["--config", config, "gen-initial"]).status().unwrap().success());
    let out = kvqa().args(["--config", config, "--backend", "fallback", "gen-initial"]).output().unwrap();
    // the fallback backend has a different id, so scripted cache entries do not apply
    assert_eq!(out.status.code(), Some(1));
    assert!(kvqa().args(["--config", config, "--backend", "fallback", "cluster"]).status().unwrap().success());
}

#[test]
fn export_fid_writes_header_then_records() {
    let dir = tempfile::tempdir().unwrap();
    let ws = build(dir.path(), &Fixture { instances: 10, t_statements: 3, flips: vec![], grid: vec![] });
    let config = ws.config.to_str().unwrap();
    for cmd in ["gen-initial", "cluster", "diversify"] {
        assert!(kvqa().args(["--config", config, cmd]).status().unwrap().success());
    }
    let diagnostics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.work_dir.join("diversify_diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diagnostics["sets"], 10);
    assert_eq!(diagnostics["failed_draws"], 0);
    assert!(diagnostics["duplicate_statements"].as_u64().unwrap() <= 20);

    let out = kvqa().args(["--config", config, "--num-knowledge", "3", "export-fid"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(ws.work_dir.join("fid_n3.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0]["length_penalty"], -1.0);
    assert_eq!(lines[1]["contexts"].as_array().unwrap().len(), 2 + 3);
}

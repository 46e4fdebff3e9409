use std::path::PathBuf;
use std::process::Command;

use plantctl::config::{self, PlantConfig};
use plantctl::scenario::{self, Scenario};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn published(name: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(root().join("schema").join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn published_schemas_match_the_types() {
    assert_eq!(published("plant-config.schema.json"), config::schema(), "regenerate with `plantctl schema config`");
    assert_eq!(published("scenario.schema.json"), scenario::schema(), "regenerate with `plantctl schema scenario`");
}

#[test]
fn shipped_documents_are_valid() {
    let cfg = PlantConfig::load(&root().join("configs/reference-plant.toml")).unwrap();
    assert_eq!(cfg.validate(), vec![]);
    assert_eq!(cfg.resources.len(), 5);
    assert_eq!(cfg.routines.len(), 3);
    let s = Scenario::load(&root().join("configs/demo-scenario.toml")).unwrap();
    assert!(s.events.windows(2).all(|w| w[0].at_ms <= w[1].at_ms));
}

fn plantctl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_plantctl")).args(args).output().unwrap()
}

#[test]
fn cli_validate_reports_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(root().join("configs/reference-plant.toml"))
        .unwrap()
        .replace("priority = 20\n", "priority = 10\n")
        .replace(r#"{ system_id = "purple.V02", value = 100 }"#, r#"{ system_id = "red.V02", value = 100 }"#);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, src).unwrap();
    let out = plantctl(&["validate", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("P not unique"), "{err}");
    assert!(err.contains("C2"), "{err}");

    let ok = plantctl(&["validate", root().join("configs/reference-plant.toml").to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
}

#[test]
fn cli_run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let out = plantctl(&[
        "run",
        root().join("configs/reference-plant.toml").to_str().unwrap(),
        "--scenario",
        root().join("configs/demo-scenario.toml").to_str().unwrap(),
        "--until",
        "120",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for metric in ["tof", "completion", "op-runtime"] {
        let rep = plantctl(&["report", log.to_str().unwrap(), metric]);
        assert!(rep.status.success(), "{metric}: {}", String::from_utf8_lossy(&rep.stderr));
        assert!(!rep.stdout.is_empty());
    }
    let csv = plantctl(&["report", log.to_str().unwrap(), "tof", "--csv"]);
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("metric,count"));
}

#[test]
fn cli_report_missing_log_fails() {
    let out = plantctl(&["report", "/nonexistent/events.jsonl", "tof"]);
    assert!(!out.status.success());
}

#[test]
fn cli_inject_on_loopback_explains_itself() {
    let out = plantctl(&["inject", "fault", "fill_red", "--config", root().join("configs/reference-plant.toml").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loopback"));
}

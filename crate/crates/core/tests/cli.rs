mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;

fn rulesmith(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rulesmith"))
        .args(args)
        .output()
        .unwrap()
}

fn replay(out: &Path, args: &[&str]) -> Output {
    let config = fixtures_dir().join("replay.toml");
    let mut all = vec![
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    all.extend_from_slice(args);
    rulesmith(&all)
}

fn error_line(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let last = stderr.lines().last().expect("stderr is empty");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(rulesmith(&["--help"]).status.code(), Some(0));
    assert_eq!(rulesmith(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        rulesmith(&["scan", "--threshold", "many"]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_stage_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = replay(tmp.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_line(&o);
    assert_eq!(e["error"], "stage_input_missing");
    assert_eq!(e["exit_code"], 3);
}

#[test]
fn replay_with_network_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = replay(tmp.path(), &["--allow-network", "ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "config");
}

#[test]
fn validate_reports_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = fixtures_dir().join("stubborn/draft.yar");
    let o = replay(tmp.path(), &["validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let results: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(results[0]["ok"], false);
    assert!(String::from_utf8_lossy(&o.stdout).contains("undefined_string"));

    let good = tmp.path().join("good.yar");
    std::fs::write(&good, "rule good\n{\n    meta:\n        author = \"qa\"\n    strings:\n        $a = \"x\"\n    condition:\n        $a\n}\n").unwrap();
    let o = replay(tmp.path(), &["validate", good.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn stages_chain_and_manifest_reruns() {
    let first = tempfile::tempdir().unwrap();
    for stage in [
        "ingest", "segment", "cluster", "generate", "validate", "scan", "eval", "baseline",
        "analyze",
    ] {
        let o = replay(first.path(), &[stage]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(first.path().join("manifest.json")).unwrap())
            .unwrap();
    let stages = manifest["stages"].as_object().unwrap();
    for stage in [
        "ingest", "segment", "cluster", "generate", "scan", "eval", "baseline", "analyze",
    ] {
        assert!(stages.contains_key(stage), "manifest lacks {stage}");
    }
    let rules_digest = &stages["generate"]["outputs"]["generate/rules.json"];
    assert!(rules_digest.is_string());

    // The same run, driven only by the manifest, reproduces the outputs.
    let second = tempfile::tempdir().unwrap();
    let m = first.path().join("manifest.json");
    let o = rulesmith(&[
        "--config",
        m.to_str().unwrap(),
        "--out",
        second.path().to_str().unwrap(),
        "pipeline",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for rel in [
        "cluster/clusters.json",
        "generate/rules.json",
        "eval/metrics.json",
    ] {
        let a = std::fs::read(first.path().join(rel)).unwrap();
        let b = std::fs::read(second.path().join(rel)).unwrap();
        assert!(a == b, "{rel} differs after manifest rerun");
    }
}

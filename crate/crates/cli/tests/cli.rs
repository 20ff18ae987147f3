//! End-to-end runs of the `vlmoe` binary on tiny experiment specs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "steps": 2,
  "batch_size": 4,
  "val_size": 4,
  "eval_every": 0,
  "routing_log_every": 1
}
"#;

fn vlmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlmoe"))
        .args(args)
        .env("VLMOE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vlmoe(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn spec_file(dir: &TempDir, text: &str) -> PathBuf {
    let path = dir.path().join("spec.json");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn zero_steps_gives_empty_report_and_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(&dir, SMALL);
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&spec),
        "--steps",
        "0",
        "--out",
        s(&out),
    ]);
    let run = out.join("seed-1");
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
    assert_eq!(lines(&run.join("evals.jsonl")).len(), 1);
    assert!(run.join("checkpoint.json").exists());
    assert_eq!(fs::read_to_string(out.join("spec.json")).unwrap(), SMALL);
    let resolved: Value =
        serde_json::from_str(&fs::read_to_string(out.join("resolved_spec.json")).unwrap()).unwrap();
    assert_eq!(resolved["steps"], 0);
}

#[test]
fn same_spec_and_seed_give_identical_metrics() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(&dir, SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&spec), "--seed", "5", "--out", s(&a)]);
    ok(&["train", "--config", s(&spec), "--seed", "5", "--out", s(&b)]);
    for file in [
        "metrics.jsonl",
        "evals.jsonl",
        "routing.jsonl",
        "checkpoint.json",
    ] {
        let (x, y) = (a.join("seed-5").join(file), b.join("seed-5").join(file));
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{file}");
    }
    let rows = lines(&a.join("seed-5/metrics.jsonl"));
    assert_eq!(rows.len(), 2);
    for key in [
        "step",
        "loss_total",
        "loss_mlm",
        "loss_mim",
        "loss_vlm",
        "loss_aux",
        "drop_rate_by_layer",
        "wall_ms",
    ] {
        assert!(rows[0].get(key).is_some(), "metrics row lacks {key}");
    }
}

#[test]
fn expert_sweep_makes_one_directory_per_cell() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(
        &dir,
        r#"{"steps": 1, "batch_size": 4, "val_size": 4, "axis": "experts", "values": ["1", "4", "8"]}"#,
    );
    let out = dir.path().join("sweep");
    let table = ok(&["ablate", "--config", s(&spec), "--out", s(&out)]);
    for e in [1, 4, 8] {
        assert!(out
            .join(format!("experts-{e}/seed-1/summary.json"))
            .exists());
    }
    let json: Value =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let per_token: Vec<&Value> = rows.iter().map(|r| &r["params_per_token"]).collect();
    assert!(per_token.iter().all(|p| *p == per_token[0]));
    assert!(rows[2]["total_params"].as_u64() > rows[0]["total_params"].as_u64());
    assert_eq!(table.lines().filter(|l| l.starts_with("| ")).count(), 4);
}

#[test]
fn strategy_axis_from_the_command_line() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(&dir, r#"{"steps": 1, "batch_size": 3, "val_size": 3}"#);
    let out = dir.path().join("strategies");
    ok(&[
        "ablate",
        "--config",
        s(&spec),
        "--axis",
        "strategy",
        "--out",
        s(&out),
    ]);
    let md = fs::read_to_string(out.join("ablation.md")).unwrap();
    let rows: Vec<&str> = md
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| strategy"))
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("| none |") && rows[3].starts_with("| TV |"));
}

#[test]
fn report_and_simulate_read_routing_logs() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(&dir, SMALL);
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&spec), "--out", s(&out)]);
    let run = out.join("seed-1");

    ok(&["report", s(&run)]);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(run.join("report/summary.json")).unwrap())
            .unwrap();
    assert_eq!(report["pools"].as_array().unwrap().len(), 2);
    assert_eq!(report["checked_against_metrics"], 4);
    for svg in [
        "kinds-text-layer2.svg",
        "kinds-image-layer2.svg",
        "drops-text.svg",
        "drops-image.svg",
        "loss.svg",
    ] {
        let body = fs::read_to_string(run.join("report").join(svg)).unwrap();
        assert!(body.starts_with("<svg"), "{svg}");
    }

    let md = ok(&["simulate", s(&run), "--workers", "2", "--alpha", "0.5"]);
    assert!(md.contains("2 workers"));
    let traces: Value =
        serde_json::from_str(&fs::read_to_string(run.join("simulate-w2/traces.json")).unwrap())
            .unwrap();
    assert!(!traces.as_array().unwrap().is_empty());

    let bad = vlmoe(&["simulate", s(&run), "--workers", "3"]);
    assert!(!bad.status.success());
}

#[test]
fn missing_routing_logs_are_an_explicit_error() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(
        &dir,
        r#"{"steps": 1, "batch_size": 3, "val_size": 3, "routing_log_every": 0}"#,
    );
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&spec), "--out", s(&out)]);
    let err = vlmoe(&["report", s(&out.join("seed-1"))]);
    assert!(!err.status.success());
    assert!(String::from_utf8_lossy(&err.stderr).contains("no routing logs"));
}

#[test]
fn invalid_specs_fail_before_any_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("never");
    for text in [
        r#"{"stepz": 1}"#,
        r#"{"seeds": []}"#,
        r#"{"experts": 3, "model": "nope.json"}"#,
    ] {
        let spec = spec_file(&dir, text);
        assert!(
            !vlmoe(&["train", "--config", s(&spec), "--out", s(&out)])
                .status
                .success(),
            "{text}"
        );
    }
    let spec = spec_file(&dir, SMALL);
    assert!(!vlmoe(&["ablate", "--config", s(&spec), "--out", s(&out)])
        .status
        .success());
    assert!(!vlmoe(&["ablate", "--axis", "colour"]).status.success());
    assert!(!out.exists());
}

#[test]
fn selftest_passes() {
    let stdout = ok(&["selftest"]);
    assert!(stdout.contains("selftest passed"));
}

//! End-to-end checks of the binary: artifact layout, determinism of the
//! metrics files, and the machine-readable failure records.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gcn-jackknife"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn synth_graph(dir: &Path) -> std::path::PathBuf {
    run_ok(bin().args([
        "--seed", "5",
        "--out-dir", dir.to_str().unwrap(),
        "synth",
        "--blocks", "2",
        "--per-block", "8",
        "--p-in", "0.6",
        "--p-out", "0.1",
        "--feature-dim", "4",
    ]));
    dir.join("graph.json")
}

#[test]
fn random_acquisition_metrics_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = synth_graph(tmp.path());
    let mut runs = Vec::new();
    for name in ["run1", "run2"] {
        let out_dir = tmp.path().join(name);
        run_ok(bin().args([
            "--seed", "7",
            "--out-dir", out_dir.to_str().unwrap(),
            "active-learn",
            "--graph", graph.to_str().unwrap(),
            "--strategy", "random",
            "--initial", "2",
            "--step-size", "2",
            "--budget", "4",
            "--epochs", "15",
            "--iterations", "10",
            "--sample-batch", "4",
        ]));
        runs.push(fs::read(out_dir.join("metrics.jsonl")).unwrap());
        assert!(out_dir.join("timings.jsonl").exists());
        assert!(out_dir.join("manifest.json").exists());
    }
    assert_eq!(runs[0], runs[1], "metrics files differ between identical runs");
    let text = String::from_utf8(runs[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 3, "one row per step plus the initial fit");
    for line in text.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(row.get("labels_used").is_some());
        assert!(row.get("micro_f1_test").is_some());
    }
}

#[test]
fn quantify_reports_every_node_of_a_toy_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = tmp.path().join("toy.json");
    fs::write(
        &graph,
        serde_json::json!({
            "num_nodes": 3,
            "edges": [[0, 1], [1, 2]],
            "features": [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]],
            "labels": [0, 1, 1],
            "train_mask": [0, 1],
            "val_mask": [],
            "test_mask": [2],
        })
        .to_string(),
    )
    .unwrap();
    run_ok(bin().args([
        "--out-dir", tmp.path().to_str().unwrap(),
        "quantify",
        "--graph", graph.to_str().unwrap(),
        "--epochs", "30",
        "--iterations", "20",
    ]));
    let report = fs::read_to_string(tmp.path().join("uncertainty.tsv")).unwrap();
    assert!(report.starts_with("# alpha 0.025\n"), "header:\n{report}");
    let data_rows: Vec<&str> = report.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data_rows.len(), 3, "one row per node:\n{report}");
    for row in data_rows {
        assert_eq!(row.split('\t').count(), 5);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["verb"], "quantify");
    assert!(manifest["inputs"][0]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn verify_passes_on_the_default_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_ok(bin().args(["--out-dir", tmp.path().to_str().unwrap(), "verify"]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.matches("PASS").count(), 4, "table:\n{stdout}");
    assert!(!stdout.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("verify.json")).unwrap())
            .unwrap();
    assert_eq!(report["all_pass"], true);
}

#[test]
fn invalid_graph_fails_with_machine_readable_record() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = tmp.path().join("bad.json");
    fs::write(
        &graph,
        serde_json::json!({
            "num_nodes": 3,
            "edges": [[0, 7]],
            "features": [[1.0], [0.0], [0.5]],
            "labels": [0, 1, 0],
            "train_mask": [0, 1],
            "val_mask": [],
            "test_mask": [2],
        })
        .to_string(),
    )
    .unwrap();
    let out = bin()
        .args([
            "--out-dir", tmp.path().to_str().unwrap(),
            "quantify",
            "--graph", graph.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let record_line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("json record on stderr");
    let record: serde_json::Value = serde_json::from_str(record_line).unwrap();
    assert_eq!(record["error"]["kind"], "edge_out_of_range");
}

#[test]
fn unknown_verb_exits_with_usage_record() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let record_line = stderr.lines().rev().find(|l| l.starts_with('{')).unwrap();
    let record: serde_json::Value = serde_json::from_str(record_line).unwrap();
    assert_eq!(record["error"]["kind"], "usage");
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = synth_graph(tmp.path());
    let config = tmp.path().join("config.json");
    fs::write(
        &config,
        serde_json::json!({
            "train": {"epochs": 20},
            "interval": {"alpha": 0.1},
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    run_ok(bin().args([
        "--out-dir", out_dir.to_str().unwrap(),
        "--config", config.to_str().unwrap(),
        "quantify",
        "--graph", graph.to_str().unwrap(),
        "--alpha", "0.2",
        "--iterations", "15",
        "--sample-batch", "4",
    ]));
    let report = fs::read_to_string(out_dir.join("uncertainty.tsv")).unwrap();
    // Flag beats the config file's 0.1 and the built-in 0.025.
    assert!(report.starts_with("# alpha 0.2\n"), "header:\n{report}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    // The config file's epoch count survives (no flag given for it).
    assert_eq!(manifest["resolved"]["train"]["epochs"], 20);
    assert_eq!(manifest["resolved"]["alpha"], 0.2);
}

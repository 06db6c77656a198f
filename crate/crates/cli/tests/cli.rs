use std::path::Path;
use std::process::{Command, Output};

fn labelfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelfuse"))
        .args(args)
        .env_remove("LABELFUSE_OUTPUT_DIR")
        .output()
        .expect("spawn labelfuse")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL_MOON: &str = r#"{
    "dataset": {"kind": "twomoon", "n": 600, "val_size": 60},
    "synthesis": {"kind": "geometric"},
    "method": "ours",
    "basis_size": 2,
    "epochs": 2
}"#;

#[test]
fn run_writes_outputs_and_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_MOON);
    let out_dir = dir.path().join("out");
    let out = labelfuse(&["run", "--config", &cfg, "--output-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["method"], "ours");
    assert!(summary["test_accuracy"].as_f64().unwrap() > 0.0);
    for f in ["report.json", "curves.csv", "model.ckpt"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn output_dir_env_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let elsewhere = dir.path().join("from-config");
    let body = SMALL_MOON.replacen('{', &format!("{{\"output_dir\": {:?},", elsewhere.to_str().unwrap()), 1);
    let cfg = write_config(dir.path(), &body);
    let env_dir = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_labelfuse"))
        .args(["run", "--config", &cfg])
        .env("LABELFUSE_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_dir.join("report.json").exists());
    assert!(!elsewhere.exists());
}

#[test]
fn bad_config_exits_nonzero_with_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"dataset": {"kind": "twomoon"}, "synthesis": {"kind": "geometric"}, "method": "ours", "lambda": -1}"#);
    let out = labelfuse(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "config");

    let out = labelfuse(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "io");
}

#[test]
fn sweep_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_MOON);
    let out_dir = dir.path().join("sweep");
    let out = labelfuse(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "lambda",
        "--values",
        "0.5,1",
        "--methods",
        "ours,mjv",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
    let table = std::fs::read_to_string(out_dir.join("sweep_lambda.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "lambda,ours,mjv");
    assert_eq!(lines.len(), 3);
}

#[test]
fn heatmap_reads_a_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_MOON);
    let out_dir = dir.path().join("run");
    assert!(labelfuse(&["run", "--config", &cfg, "--output-dir", out_dir.to_str().unwrap()]).status.success());
    let grid = dir.path().join("w1.csv");
    let out = labelfuse(&[
        "heatmap",
        "--config",
        &cfg,
        "--checkpoint",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--quantity",
        "weight[1]",
        "--resolution",
        "5",
        "--out",
        grid.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&grid).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,value"));
    assert_eq!(text.lines().count(), 26);

    let out = labelfuse(&[
        "heatmap",
        "--config",
        &cfg,
        "--checkpoint",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--quantity",
        "weight[9]",
        "--out",
        grid.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn twomoon_export() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("moon.csv");
    let out = labelfuse(&["twomoon", "--n", "50", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,golden,ant1,ant2"));
    assert_eq!(text.lines().count(), 51);
}

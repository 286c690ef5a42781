use std::path::Path;
use std::process::{Command, Output};

use memseg::harness::ExperimentConfig;

fn memseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config_file(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = memseg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn help_exits_0() {
    let out = memseg(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-data",
        "pretrain",
        "learn-static",
        "eval",
        "tta",
        "ablate",
        "topk-sweep",
        "fed",
        "comm-report",
        "gradcheck",
    ] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

fn exit_code(args: &[&str]) -> Option<i32> {
    memseg(args).status.code()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad_fraction = config_file(dir.path(), r#"{"supervision_fraction": 0.5}"#);
    assert_eq!(
        exit_code(&["comm-report", "--config", &bad_fraction, "--out", out]),
        Some(2)
    );
    let unknown_key = config_file(dir.path(), r#"{"sed": 1}"#);
    assert_eq!(
        exit_code(&["comm-report", "--config", &unknown_key, "--out", out]),
        Some(2)
    );
    let bad_tau = config_file(dir.path(), r#"{"working_memory": {"tau_dice": 1.5}}"#);
    assert_eq!(exit_code(&["comm-report", "--config", &bad_tau, "--out", out]), Some(2));
    let bad_share = config_file(dir.path(), r#"{"pretrain": {"support_free_prob": 1.5}}"#);
    assert_eq!(
        exit_code(&["comm-report", "--config", &bad_share, "--out", out]),
        Some(2)
    );
    assert_eq!(exit_code(&["eval", "--supervision", "0.2", "--out", out]), Some(2));
    assert_eq!(
        exit_code(&["comm-report", "--config", "/nonexistent.json", "--out", out]),
        Some(2)
    );
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(dir.path(), r#"{"checkpoint": "missing.json"}"#);
    let out = memseg(&["learn-static", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn comm_report_reproduces_the_reference_saving() {
    let dir = tempfile::tempdir().unwrap();
    let out = memseg(&[
        "comm-report",
        "--memory-params",
        "2000000",
        "--backbone-params",
        "148630000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("comm_report.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert!((printed["reduction_ratio"].as_f64().unwrap() - 74.3).abs() <= 0.05);
    assert!((printed["reduction_percent"].as_f64().unwrap() - 98.65).abs() <= 0.01);
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(
        dir.path(),
        r#"{"data": {"n_adapt": 40, "n_shifted": 8, "n_pretrain": 8}}"#,
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = memseg(&[
            "gen-data",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 9);
    for name in names {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap()
        );
    }
    let first = std::fs::read_to_string(a.join("adapt_test.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 8);
}

#[test]
fn shipped_config_matches_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let default = ExperimentConfig::default();
    assert_eq!(cfg.hash(), default.hash());
    assert_eq!(
        std::fs::canonicalize(&cfg.checkpoint).unwrap(),
        std::fs::canonicalize(&default.checkpoint).unwrap()
    );
}

use std::path::Path;
use std::process::{Command, Output};

fn snakevit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snakevit")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_for_every_command() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&snakevit(dir.path(), &["--help"])), 0);
    for cmd in ["analyze", "gradcheck", "synth", "pretrain", "train", "eval", "cam"] {
        let o = snakevit(dir.path(), &[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        assert!(stdout(&o).contains("Usage"), "{cmd}");
    }
}

#[test]
fn analyze_reports_and_checks_targets() {
    let dir = tempfile::tempdir().unwrap();
    let o = snakevit(dir.path(), &["analyze", "--json", "--check-reference"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["input_shape"], serde_json::json!([3, 224, 224]));
    assert_eq!(v["reference"].as_array().unwrap().len(), 2);

    assert_eq!(code(&snakevit(dir.path(), &["analyze", "--ablation", "no-dsc", "--check-reference"])), 0);
    assert_eq!(code(&snakevit(dir.path(), &["analyze", "--ablation", "no-vit", "--check-reference"])), 2);
    assert_eq!(code(&snakevit(dir.path(), &["analyze", "--input-size", "256", "--check-reference"])), 2);
    // the tiny model is far from the full-size targets
    assert_eq!(code(&snakevit(dir.path(), &["analyze", "--tiny", "--check-reference"])), 3);
    assert_eq!(code(&snakevit(dir.path(), &["analyze", "--input-size", "100"])), 2);

    std::fs::write(dir.path().join("bad.json"), r#"{"widths": [1]}"#).unwrap();
    let o = snakevit(dir.path(), &["analyze", "--config", "bad.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("widths"));
    assert_eq!(code(&snakevit(dir.path(), &["analyze", "--config", "missing.json"])), 4);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = snakevit(dir.path(), &["gradcheck", "--op", "conv", "--op", "softmax"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).matches("PASS").count(), 2);
    assert_eq!(code(&snakevit(dir.path(), &["gradcheck", "--op", "conv", "--tolerance", "1e-12"])), 3);
    assert_eq!(code(&snakevit(dir.path(), &["gradcheck", "--op", "nope"])), 2);
    assert_eq!(code(&snakevit(dir.path(), &["gradcheck", "--op", "conv", "--tolerance", "0"])), 2);
    let o = snakevit(dir.path(), &["gradcheck", "--list"]);
    assert!(stdout(&o).lines().any(|l| l == "dsc_block"));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_snakevit"))
        .args(["gradcheck", "--list"])
        .env("STK_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&snakevit(dir.path(), &["synth", "--out", out, "--n", "6", "--task", "lesion"])), 0);
    }
    for f in ["images.stk", "labels.stk", "manifest.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(code(&snakevit(dir.path(), &["synth", "--out", "c", "--n", "0"])), 2);
}

#[test]
fn train_eval_cam_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&snakevit(d, &["synth", "--out", "train", "--n", "8"])), 0);
    assert_eq!(code(&snakevit(d, &["synth", "--out", "test", "--n", "8", "--offset", "8"])), 0);
    std::fs::write(d.join("t.json"), r#"{"train": {"batch_size": 8}}"#).unwrap();
    let o = snakevit(d, &["train", "--tiny", "--config", "t.json", "--data", "train", "--out", "run", "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.stk", "model.stk.json", "train_log.csv", "config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(d.join("run/train_log.csv")).unwrap().lines().count(), 2);

    let o = snakevit(d, &["eval", "--model", "run/model.stk", "--data", "test", "--out", "report.json"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(code(&snakevit(d, &["eval", "--model", "run/model.stk", "--data", "test", "--out", "r.json", "--min-auc", "1.01"])), 3);
    assert_eq!(code(&snakevit(d, &["eval", "--model", "run/model.stk", "--data", "nowhere", "--out", "r.json"])), 4);

    let o = snakevit(d, &["cam", "--model", "run/model.stk", "--data", "test", "--index", "1", "--out", "m.pgm"]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read(d.join("m.pgm")).unwrap().starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(code(&snakevit(d, &["cam", "--model", "run/model.stk", "--data", "test", "--index", "8", "--out", "m.pgm"])), 2);
    assert_eq!(code(&snakevit(d, &["cam", "--model", "run/model.stk", "--data", "test", "--layer", "nope", "--out", "m.pgm"])), 2);

    std::fs::write(d.join("s.json"), r#"{"train": {"stop_at_auc": 0.9}}"#).unwrap();
    assert_eq!(code(&snakevit(d, &["train", "--tiny", "--config", "s.json", "--data", "train", "--out", "r2"])), 2);
    std::fs::write(d.join("run/model.stk"), b"garbage").unwrap();
    assert_eq!(code(&snakevit(d, &["eval", "--model", "run/model.stk", "--data", "test", "--out", "r.json"])), 4);
}

//! End-to-end checks of the `protoseg` binary: argument handling, the
//! train → eval round trip on a tiny synthetic run, and the exit-code
//! contract (0 success, 2 configuration, 3 data, 4 numeric).

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protoseg"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn protoseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CONFIG: &str = r#"
[dataset]
seed = 7
num_labelled = 2
num_unlabelled = 2
num_val = 1
dims = [8, 8, 8]
num_classes = 2

[train]
seed = 7
max_iters = 3
base_channels = 4
checkpoint_interval = 3
max_anchors = 16
max_negatives = 32

[augment]
crop = [8, 8, 8]
"#;

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY_CONFIG).unwrap();
    p
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = run(&mut bin());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Usage"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_config_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .arg("train")
        .arg("--config")
        .arg(dir.path().join("does-not-exist.toml"))
        .arg("--out")
        .arg(dir.path().join("out")));
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.starts_with("config error:"), "stderr: {err}");
    assert_eq!(err.trim().lines().count(), 1, "one-line diagnostic: {err}");
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt = out_dir.join("final.ckpt");
    assert!(ckpt.exists(), "final checkpoint missing");
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "one metrics row per iteration");

    let records = dir.path().join("eval.jsonl");
    let out = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--window")
        .arg("8,8,8")
        .arg("--stride")
        .arg("8,8,8")
        .arg("--out")
        .arg(&records));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&records).unwrap();
    assert!(!text.trim().is_empty(), "no evaluation records written");
    for line in text.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        let dice = row["dice"].as_f64().expect("dice field");
        assert!((0.0..=1.0).contains(&dice), "dice out of range: {dice}");
    }
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("broken.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint at all").unwrap();
    let out = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--window")
        .arg("8,8,8")
        .arg("--stride")
        .arg("8,8,8"));
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("data error:"), "stderr: {}", stderr(&out));
}

#[test]
fn diverging_run_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = run(bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .env("PROTOSEG_TRAIN_LR0", "1e18"));
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("numeric error:"), "stderr: {}", stderr(&out));
}

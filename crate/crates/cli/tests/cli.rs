use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afnet::config::ExperimentConfig;

fn afnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afnet")).args(args).env("AFNET_THREADS", "1").output().expect("binary runs")
}

fn smoke_config(dir: &Path, epochs: usize) -> PathBuf {
    let mut cfg = ExperimentConfig::desk();
    cfg.dataset.train_size = 24;
    cfg.dataset.eval_size = 8;
    cfg.training.epochs = epochs;
    cfg.training.batch_size = 8;
    let path = dir.join(format!("smoke{epochs}.json"));
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_passes_on_fresh_models() {
    let out = afnet(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 30 && text.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn train_twice_is_byte_identical_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = afnet(&["train", "--config", s(&cfg), "--out", s(out), "--seed", "3"]);
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let metrics = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, std::fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,split,accuracy,ce,ratio_penalty,rt_block_0,rt_block_1,rt_block_2,rt_block_3,tau,precision_salient"
    );
    assert_eq!(lines.count(), 2);
    assert!(a.join("checkpoint.ckpt").exists() && a.join("selection.csv").exists());

    let ck = a.join("checkpoint.ckpt");
    let e = afnet(&["eval", "--config", s(&cfg), "--out", s(&dir.path().join("e")), "--seed", "3", "--checkpoint", s(&ck)]);
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    let eval_row = std::fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    let train_eval_row = text.lines().nth(2).unwrap();
    assert_eq!(eval_row.lines().nth(1).unwrap(), train_eval_row);

    let an = afnet(&["analyze", "--config", s(&cfg), "--out", s(&dir.path().join("an")), "--checkpoint", s(&ck)]);
    assert_eq!(an.status.code(), Some(0), "{}", String::from_utf8_lossy(&an.stderr));
    for f in ["stats.csv", "cost.csv", "cost.txt", "selection.csv"] {
        assert!(dir.path().join("an").join(f).exists(), "{f}");
    }
}

#[test]
fn zero_epochs_writes_header_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 0);
    let out = dir.path().join("run");
    let r = afnet(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
    assert!(out.join("checkpoint.ckpt").exists());
}

#[test]
fn config_errors_exit_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut text = ExperimentConfig::desk().to_json();
    text = text.replacen("\"seed\": 0", "\"seed\": 0,\n  \"sed\": 1", 1);
    std::fs::write(&path, text).unwrap();
    let r = afnet(&["train", "--config", s(&path), "--out", s(&dir.path().join("x"))]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8(r.stderr).unwrap();
    assert!(err.contains("bad.json:") && err.contains("unknown field `sed`"), "{err}");

    let r = afnet(&["train", "--policy", "sometimes", "--out", s(&dir.path().join("y"))]);
    assert_eq!(r.status.code(), Some(2));
    let r = afnet(&["train", "--rt", "1.5", "--out", s(&dir.path().join("z"))]);
    assert_eq!(r.status.code(), Some(2));
    let r = afnet(&["ablate", "--policy", "navigation,bogus", "--out", s(&dir.path().join("w"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk();
    cfg.dataset.train_size = 32;
    cfg.dataset.eval_size = 8;
    cfg.training.epochs = 1;
    cfg.training.batch_size = 8;
    cfg.training.lr = 1e30;
    let path = dir.path().join("nan.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    let r = afnet(&["train", "--config", s(&path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn ablate_writes_runs_then_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 1);
    let out = dir.path().join("grid");
    let r = afnet(&["ablate", "--config", s(&cfg), "--out", s(&out), "--policy", "navigation,uniform", "--ratios", "0.25,1.0", "--seeds", "0,1"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2 * 2 + 2 * 2);
    assert!(rows[..8].iter().all(|r| r.starts_with("run,")));
    assert!(rows[8..].iter().all(|r| r.starts_with("summary,")));
}

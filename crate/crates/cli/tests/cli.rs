use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentcrf"))
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_in(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let tiny = tiny();
    let mut args = vec![cmd, "--config", tiny.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn gradcheck_with_fixed_seed_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let out = run_in("gradcheck", dir, &["--seed", "7"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ra = fs::read(a.path().join("gradcheck.csv")).unwrap();
    let rb = fs::read(b.path().join("gradcheck.csv")).unwrap();
    assert_eq!(ra, rb);
    let text = String::from_utf8(ra).unwrap();
    assert!(text.contains("meta,seed,7"));
    assert!(text.contains("metric,all_passed,true"));
}

#[test]
fn unknown_subcommand_exits_with_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn config_parse_error_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[crf]\nnum_filters = \"eight\"\n").unwrap();
    let out = run(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn handoff_violation_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("handoff.toml");
    // 40 of 40 sparse steps leave a clean latent, which cannot re-enter a
    // noisier dense step.
    fs::write(&cfg, "[pipeline]\npre_steps = 40\n").unwrap();
    let out = run(&["sample", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_artifact_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in("distill", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn tiny_end_to_end_chain_emits_all_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "train-surrogate", "train-crf", "distill", "eval"] {
        let out = run_in(cmd, dir.path(), &[]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let eval = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    for key in [
        "frechet.seed0.hybrid",
        "frechet.seed1.truncated",
        "vendi.ratio",
        "denoise.improved_fraction",
        "convergence.change_at_5",
        "convergence.settled_fraction",
        "variance.initial",
        "flops.crf_call",
        "probe_accuracy.teacher",
        "handoff.reentry_step",
        "feature_extractor",
    ] {
        assert!(eval.contains(&format!("metric,{key},")), "missing {key}");
    }
    let timings = fs::read_to_string(dir.path().join("eval.timings.csv")).unwrap();
    assert!(timings.starts_with("stage,ms\n") && timings.contains("teacher.mean,"));
    let loss = fs::read_to_string(dir.path().join("train-crf.loss.csv")).unwrap();
    assert!(loss.starts_with("step,L_NT,L_adv,L_disc,L_DT,step_size\n"));
}

#[test]
fn thread_override_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = tiny();
    let out = bin()
        .args(["gradcheck", "--config", tiny.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .env("LCRF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = bin()
        .args(["gradcheck", "--config", tiny.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .env("LCRF_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
}

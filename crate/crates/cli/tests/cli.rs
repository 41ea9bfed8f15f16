//! Runs the `mrefine` binary end to end on a small corpus.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "schema = 1
corpus.clips = 2
corpus.width = 64
corpus.height = 48
train.kappa = 4
train.batch_size = 16
train.accumulation = 2
";

fn mrefine(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrefine"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn small(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mrefine(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(mrefine(dir.path(), &["synth", "--mode", "sideways"]).status.code(), Some(1));
    let help = mrefine(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("pseudolabel"));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    std::fs::write(&p, "schema = 1\nfilter.tau = soon\n").unwrap();
    let out = mrefine(dir.path(), &["--config", p.to_str().unwrap(), "config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("filter.tau"));
    assert_eq!(mrefine(dir.path(), &["--tau", "-1", "config"]).status.code(), Some(1));
    assert_eq!(mrefine(dir.path(), &["--config", "/nonexistent/x.cfg", "config"]).status.code(), Some(1));
}

#[test]
fn missing_stage_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = mrefine(dir.path(), &["--config", &cfg, "pseudolabel"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_prints_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = mrefine(dir.path(), &["--tau", "5", "--kappa", "50", "--videos", "multi", "config"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.replace(' ', "") == "filter.tau=5.0"), "{text}");
    assert!(text.lines().any(|l| l.replace(' ', "") == "train.kappa=50"));
    assert!(text.lines().any(|l| l.replace(' ', "") == "train.videos=multi"));
}

#[test]
fn ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    assert!(mrefine(dir.path(), &["--config", &cfg, "synth"]).status.success());
    let corpus = dir.path().join("out/corpus");
    let out = mrefine(dir.path(), &["--config", &cfg, "eval", "--pred", corpus.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let flow = std::fs::read_to_string(dir.path().join("out/eval/flow.csv")).unwrap();
    let all = flow.lines().find(|l| l.starts_with("all,")).unwrap();
    assert_eq!(all, "all,0.0");
    let tracks = std::fs::read_to_string(dir.path().join("out/eval/tracks.csv")).unwrap();
    let header: Vec<&str> = tracks.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = tracks.lines().find(|l| l.starts_with("all,")).unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();
    assert_eq!(col("ate"), 0.0);
    assert_eq!(col("delta"), 100.0);
}

#[test]
fn full_run_writes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = mrefine(dir.path(), &["--config", &cfg, "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("tracks"));
    for m in ["synth", "pseudolabel", "finetune", "estimate", "eval"] {
        assert!(dir.path().join(format!("out/manifest-{m}.txt")).exists(), "{m}");
    }
    assert!(mrefine(dir.path(), &["--config", &cfg, "viz"]).status.success());
    assert!(dir.path().join("out/viz/clip00/flow_0.png").exists());
    let frozen = mrefine(dir.path(), &["--config", &cfg, "estimate", "--frozen"]);
    assert!(frozen.status.success());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use factlab_cli::ExperimentConfig;
use proptest::prelude::*;
use serde_json::Value;

fn factlab(args: &[&str]) -> (bool, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_factlab")).args(args).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let json = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text:?}"));
    (out.status.success(), json)
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("factlab-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    let text = format!(
        "d = 16\nn_freq = 2\nn_rare = 1\nk = 2\nr_size = 3\nm = 4\nt_p = 6\nh1 = 2\nh2 = 4\nt_f = 4\neval_every = 2\nckpt_every = 2\nout_dir = {}\n",
        dir.join("runs").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_then_ood_curve() {
    let dir = scratch("run");
    let cfg = tiny_config(&dir);
    let (ok, v) = factlab(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(ok, "{v}");
    let run_dir = dir.join("runs").join("seed_0");
    for f in [
        "manifest.json",
        "metrics.csv",
        "trace.csv",
        "heatmap.csv",
        "data/vocab.json",
        "data/ntp.jsonl",
    ] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let (ok, v) = factlab(&["ood-curve", "--run-dir", run_dir.to_str().unwrap()]);
    assert!(ok, "{v}");
    assert_eq!(v["points"], 3);
    let curve = fs::read_to_string(run_dir.join("ood_curve.csv")).unwrap();
    assert_eq!(curve.lines().filter(|l| l.ends_with(",true")).count(), 1);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn ood_curve_without_checkpoints() {
    let dir = scratch("pretrain-only");
    let (ok, v) = factlab(&["ood-curve", "--run-dir", dir.to_str().unwrap()]);
    assert!(!ok);
    assert_eq!(v["error"], "Io");

    let cfg = tiny_config(&dir);
    let (ok, v) = factlab(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert!(ok, "{v}");
    let run_dir = dir.join("runs").join("seed_0");
    let (ok, v) = factlab(&["ood-curve", "--run-dir", run_dir.to_str().unwrap()]);
    assert!(!ok);
    assert_eq!(v["error"], "MissingCheckpoints");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn config_errors_name_the_line() {
    let dir = scratch("badcfg");
    let path = dir.join("bad.cfg");
    fs::write(&path, "d = 128\n# comment\nwidth = 3\n").unwrap();
    let (ok, v) = factlab(&["gen-data", "--config", path.to_str().unwrap()]);
    assert!(!ok);
    assert_eq!(v["error"], "Config");
    assert!(v["message"].as_str().unwrap().contains("line 3"), "{v}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let (ok, v) = factlab(&["eval", "--checkpoint", "/nonexistent/ckpt_1"]);
    assert!(!ok);
    assert_eq!(v["error"], "Io");
}

#[test]
fn grad_check_passes() {
    let (ok, v) = factlab(&["grad-check", "--seed", "3", "--instances", "5"]);
    assert!(ok, "{v}");
    assert_eq!(v["passed"], true);
}

proptest! {
    #[test]
    fn config_text_round_trip(
        d in 109usize..512,
        beta in 0.0f64..1.0,
        lambda in 0.001f64..1e4,
        eta_f in proptest::option::of(0.0f64..10.0),
        lowrank: bool,
        seeds in proptest::collection::vec(any::<u64>(), 1..5),
        out in "[a-z][a-z0-9_/]{0,12}",
    ) {
        let cfg = ExperimentConfig {
            d,
            beta,
            lambda,
            eta_f,
            lowrank,
            seeds,
            out_dir: out.into(),
            ..ExperimentConfig::default()
        };
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

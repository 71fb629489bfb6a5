//! End-to-end runs of the `daam` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 5,
  "data": {
    "n_source_ids": 4, "n_target_train_ids": 4, "n_target_eval_ids": 3,
    "samples_per_identity": 3, "eval_samples_per_identity": 4, "queries_per_identity": 1
  },
  "train": {
    "network": { "channels": [4, 6, 8], "embedding_dim": 6, "reduction": 2 },
    "iterations": 2, "epochs_per_iteration": 1, "pretrain_epochs": 2, "batch_size": 8
  }
}"#;

fn daam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daam")).args(args).env("DAAM_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = daam(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    daam(args).status.code().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        Fixture { config: config.display().to_string(), root, _dir: dir }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let f = Fixture::new();
    let (a, b) = (f.path("a"), f.path("b"));
    let first = ok(&["gen", "--config", &f.config, "--out", &a]);
    ok(&["gen", "--config", &f.config, "--out", &b]);
    assert_eq!(read(f.root.join("a/manifest.json")), read(f.root.join("b/manifest.json")));
    assert_eq!(first.lines().count(), 4);
    for file in ["source_train.drid", "target_train.drid", "target_query.drid", "target_gallery.drid"] {
        assert_eq!(fs::read(f.root.join("a").join(file)).unwrap(), fs::read(f.root.join("b").join(file)).unwrap());
    }

    assert_eq!(code(&["gen", "--config", &f.config, "--out", &a]), 1);
    assert_eq!(code(&["gen", "--config", &f.config, "--out", &a, "--seed", "6"]), 1);
    ok(&["gen", "--config", &f.config, "--out", &a, "--force"]);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["train", "--ablate", "no-such-term"]), 1);
    assert_eq!(code(&["gen"]), 1);
    assert_eq!(code(&["gen", "--config", &f.path("missing.json"), "--out", &f.path("x")]), 2);

    let bad = f.root.join("bad.json");
    fs::write(&bad, r#"{"train": {"batch_size": 1}}"#).unwrap();
    assert_eq!(code(&["gen", "--config", &bad.display().to_string(), "--out", &f.path("y")]), 1);
    fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    assert_eq!(code(&["gen", "--config", &bad.display().to_string(), "--out", &f.path("y")]), 1);

    // A tampered split fails its manifest hash.
    let data = f.path("data");
    ok(&["gen", "--config", &f.config, "--out", &data]);
    let split = f.root.join("data/target_query.drid");
    let mut bytes = fs::read(&split).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&split, bytes).unwrap();
    assert_eq!(code(&["train", "--config", &f.config, "--data", &data, "--out", &f.path("run")]), 2);
}

#[test]
fn gradcheck_passes_on_the_tiny_network() {
    let f = Fixture::new();
    let out = f.path("gc");
    let stdout = ok(&["gradcheck", "--config", &f.config, "--out", &out]);
    assert!(stdout.contains("max relative error"));
    let summary: serde_json::Value = serde_json::from_str(&read(f.root.join("gc/gradcheck.json"))).unwrap();
    assert_eq!(summary["passed"], true);
    assert!(summary["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn train_eval_and_sweeps() {
    let f = Fixture::new();
    let data = f.path("data");
    let run = f.path("run");
    ok(&["gen", "--config", &f.config, "--out", &data]);
    let csv = ok(&["train", "--config", &f.config, "--data", &data, "--out", &run]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4, "header plus iterations 0..=2:\n{csv}");
    assert_eq!(read(f.root.join("run/metrics.csv")), csv);
    for i in 0..=2 {
        assert!(f.root.join(format!("run/checkpoints/iter_{i:03}.dckp")).exists());
    }
    assert!(f.root.join("run/clusters/iter_001.json").exists());
    assert!(f.root.join("run/params.dprm").exists());
    assert_eq!(code(&["train", "--config", &f.config, "--data", &data, "--out", &run]), 1);

    // Same config and seed, same bytes.
    let again = f.path("again");
    ok(&["train", "--config", &f.config, "--data", &data, "--out", &again]);
    assert_eq!(fs::read(f.root.join("run/params.dprm")).unwrap(), fs::read(f.root.join("again/params.dprm")).unwrap());
    assert_eq!(read(f.root.join("again/metrics.csv")), csv);

    // Resuming from the middle reproduces the uninterrupted run.
    let resumed = f.path("resumed");
    ok(&["train", "--config", &f.config, "--data", &data, "--out", &resumed, "--resume", &f.path("run/checkpoints/iter_001.dckp")]);
    assert_eq!(read(f.root.join("resumed/metrics.csv")), csv);

    // Evaluating the pretraining checkpoint reproduces the baseline row.
    let pre = f.path("run/checkpoints/iter_000.dckp");
    let eval = ok(&["eval", "--checkpoint", &pre, "--data", &data, "--out", &f.path("eval")]);
    assert_eq!(eval.lines().nth(1), Some(rows[1]));

    let sweep = ok(&["sweep-k", "--checkpoint", &pre, "--data", &data, "--out", &f.path("sk"), "--ks", "2,3,4,5,6", "--iterations", "1"]);
    assert_eq!(sweep.lines().count(), 6);
    assert!(sweep.starts_with("k,iterations,mAP"));
    assert_eq!(code(&["sweep-k", "--checkpoint", &f.path("run/checkpoints/iter_001.dckp"), "--data", &data, "--out", &f.path("sk2")]), 1);

    let iters = ok(&["sweep-iters", "--checkpoint", &pre, "--data", &data, "--out", &f.path("si")]);
    assert_eq!(iters, csv);

    let attn = f.path("attn");
    ok(&["export-attn", "--checkpoint", &f.path("run/checkpoints/iter_002.dckp"), "--data", &data, "--out", &attn, "--samples", "0,1"]);
    let exported: serde_json::Value = serde_json::from_str(&read(f.root.join("attn/attention.json"))).unwrap();
    assert_eq!(exported.as_array().unwrap().len(), 2);
    let pgm = exported[0]["shared_pgm"].as_str().unwrap();
    assert!(fs::read(pgm).unwrap().starts_with(b"P5"));
}

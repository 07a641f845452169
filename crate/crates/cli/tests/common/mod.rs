#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_facestyle");

/// Small settings so a whole pipeline runs in a few seconds.
pub const SMALL_CONFIG: &str = r#"{
  "seed": 3,
  "corpus": {"per_style": 3, "frames": 80},
  "pretrain": {"steps": 5},
  "adapt": {"steps": 3},
  "vq_train": {"steps": 20},
  "gpt_train": {"steps": 20},
  "paths": {
    "corpus": "corpus", "expr": "expr.admk", "adapted": "adapted.admk", "vq": "vq.admk",
    "gpt": "gpt.admk", "style_db": "styles.asdb", "pred": "pred", "report": "report.json"
  }
}"#;

pub fn facestyle(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env_remove("RUST_LOG").output().expect("binary runs")
}

/// Run and insist on success, returning stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = facestyle(dir, args);
    assert!(
        out.status.success(),
        "facestyle {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn code(dir: &Path, args: &[&str]) -> i32 {
    facestyle(dir, args).status.code().expect("exit code")
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("c.json");
    std::fs::write(&p, text).unwrap();
    p
}

/// Every stage of both pipelines, in order, driven by `c.json` in `dir`.
pub const PIPELINE: &[&[&str]] = &[
    &["--config", "c.json", "gen-corpus"],
    &["--config", "c.json", "pretrain-expr"],
    &["--config", "c.json", "adapt-expr", "--ref", "corpus/train/excited_001"],
    &["--config", "c.json", "infer-expr", "--corpus", "corpus"],
    &["--config", "c.json", "train-vq"],
    &["--config", "c.json", "train-posegpt"],
    &["--config", "c.json", "build-styledb"],
    &["--config", "c.json", "retrieve", "--ref", "corpus/holdout/excited_000", "--out", "retrieved.json"],
    &["--config", "c.json", "infer-pose", "--ref", "corpus/train/excited_001", "--corpus", "corpus"],
    &["--config", "c.json", "eval"],
    &["grad-check", "--seeds", "1", "--filter", "linear", "--out", "grad.json"],
];

pub fn run_pipeline(dir: &Path) {
    write_config(dir, SMALL_CONFIG);
    for args in PIPELINE {
        ok(dir, args);
    }
}

/// Relative path and contents of every file under `root`, sorted.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

//! Helpers for driving the compiled binary in integration tests.
// Each integration-test target compiles this module independently and uses a
// different subset of it.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn attnseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnseg"))
        .args(args)
        .output()
        .expect("binary is runnable")
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed (status {:?})\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process not killed by signal")
}

/// Writes a one-layer 16x16 run configuration that trains in seconds.
pub fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("tiny.json");
    let body = format!(
        r#"{{
  "model": {{"patch_size": 4, "embed_dim": 16, "num_layers": 1, "num_heads": 2}},
  "train": {{"epochs": {epochs}, "batch_size": 8, "eval_every": 1}}
}}"#
    );
    std::fs::write(&path, body).expect("config written");
    path
}

/// Generates a small 2-class 16x16 dataset under `dir`.
pub fn tiny_dataset(dir: &Path, num_images: usize, seed: u64) {
    let out = attnseg(&[
        "generate-data",
        "--out",
        dir.to_str().unwrap(),
        "--num-images",
        &num_images.to_string(),
        "--classes",
        "2",
        "--image-size",
        "16",
        "--seed",
        &seed.to_string(),
    ]);
    assert_ok(&out);
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

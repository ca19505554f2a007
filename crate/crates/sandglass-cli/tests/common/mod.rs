//! Helpers shared by the CLI and acceptance test suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sandglass_core::{write_tensor_file, Rng, Shape, Tensor};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sandglass"));
    c.env("SANDGLASS_NO_COLOR", "1");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .output()
        .expect("failed to spawn sandglass binary")
}

pub fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is not utf-8")
}

pub fn stderr_str(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is not utf-8")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("process killed by signal")
}

pub fn json(out: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout_str(out)).expect("stdout is not valid JSON")
}

/// Two-stage toy model: small enough for fast forward passes in debug
/// builds, deep enough to include a shortcut block and a strided block.
pub const TOY_SPEC: &str = r#"{
  "family": "mobilenext",
  "width_multiplier": 1.0,
  "resolution": 32,
  "num_classes": 10,
  "alpha": 1.0,
  "divisor": 8,
  "stages": [
    { "block": "sandglass", "t": 2, "c": 16, "s": 1, "b": 1 },
    { "block": "sandglass", "t": 6, "c": 24, "s": 2, "b": 1 }
  ]
}"#;

pub fn write_toy_spec(dir: &Path) -> PathBuf {
    let path = dir.join("toy.json");
    std::fs::write(&path, TOY_SPEC).unwrap();
    path
}

pub fn write_random_input(dir: &Path, name: &str, n: usize, r: usize, seed: u64) -> PathBuf {
    let mut rng = Rng::new(seed);
    let x = Tensor::<f32>::random_normal(Shape::new(n, 3, r, r), &mut rng, 0.0, 1.0).unwrap();
    let path = dir.join(name);
    write_tensor_file(&path, &x).unwrap();
    path
}

//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_curvadion"))
}

pub fn run_bin(args: &[&str]) -> Output {
    bin().args(args).env_remove("CURVADION_THREADS").output().expect("spawn curvadion")
}

pub fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).expect("write config");
    p
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Every file under `dir`, as (relative path, bytes), sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).expect("read_dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).expect("read")));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Small noisy quadratic shared by the CLI tests.
pub const SMALL_QUADRATIC: &str = r#"
seed = 3
steps = 40
n_workers = 3

[policy]
kind = "adaptive"
tau = 0.3

[problem]
kind = "quadratic"
layers = [[6, 4], [4, 2]]
noise_sigma = 0.05
"#;

/// Small curvature-switch track shared by the CLI tests.
pub const SMALL_SWITCH: &str = r#"
seed = 1
steps = 120
n_workers = 4

[policy]
kind = "adaptive"
tau = 0.3

[problem]
kind = "curvature_switch"
layers = [[8, 4], [4, 2]]
schedule = { first = 30, length = 5, period = 40 }
"#;

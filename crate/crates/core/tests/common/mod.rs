#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use ntklev::config::ExperimentConfig;
use ntklev::{generate_dataset, Dataset, SeedStream};

#[path = "../../src/oracle.rs"]
pub mod oracle;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn shipped_config(name: &str) -> ExperimentConfig {
    let path = repo_root().join("configs").join(format!("{name}.json"));
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
    generate_dataset(n, d, SeedStream::new(seed, 0), 0.05).expect("feasible dataset")
}

/// Writes one verdict line past the test harness capture, then asserts.
pub fn verdict(id: u32, name: &str, pass: bool, detail: impl std::fmt::Display) {
    let line = format!(
        "{} criterion {id:>2} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use vpc_core::harness::{run_scenario, Scenario, ScenarioScript};
use vpc_host::export::trace_jsonl;

pub const GOLDEN_SEED: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenEntry {
    pub scenario: Scenario,
    pub events: u64,
    pub sha256: String,
    /// Stored trace, relative to the golden directory; omitted for traces
    /// too large to keep in the repository.
    pub file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenManifest {
    pub seed: u64,
    pub traces: Vec<GoldenEntry>,
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn load_manifest() -> GoldenManifest {
    let p = golden_dir().join("manifest.json");
    serde_json::from_str(&fs::read_to_string(&p).expect("golden manifest")).expect("golden manifest parses")
}

/// The preset's trace file as `vpcctl scenario run` writes it.
pub fn render(s: Scenario, seed: u64) -> (u64, String) {
    let run = run_scenario(&ScenarioScript::preset(s), seed).expect("preset runs");
    (run.report.events, trace_jsonl(&run.trace))
}

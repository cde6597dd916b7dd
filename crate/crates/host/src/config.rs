//! JSON config files: cluster topology, deployment spec, whole scenario
//! scripts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;
use vpc_core::harness::{ClusterSpec, Scenario, ScenarioScript, ScriptError};
use vpc_core::model::DeploymentSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {msg}")]
    Parse { path: PathBuf, line: usize, column: usize, msg: String },
    #[error("invalid script: {0}")]
    Script(#[from] ScriptError),
}

pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_json(&text, path)
}

/// Where a scenario run gets its inputs.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    /// Whole scenario script; replaces the preset.
    pub script: Option<PathBuf>,
    /// Cluster topology; replaces the preset's cluster.
    pub topology: Option<PathBuf>,
    /// Deployment spec; replaces the preset's spec.
    pub spec: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn script(&self, scenario: Scenario) -> Result<ScenarioScript, ConfigError> {
        let mut script = match &self.script {
            Some(p) => load_json::<ScenarioScript>(p)?,
            None => ScenarioScript::preset(scenario),
        };
        if let Some(p) = &self.topology {
            script.cluster = load_json::<ClusterSpec>(p)?;
        }
        if let Some(p) = &self.spec {
            script.spec = load_json::<DeploymentSpec>(p)?;
        }
        script.validate()?;
        Ok(script)
    }
}

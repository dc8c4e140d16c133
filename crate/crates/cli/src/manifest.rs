//! Run manifests: one JSON document per invocation, enough to replay it.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{ConfigSource, ScanMode};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcommand {
    Simulate,
    Scan,
    Estimate,
    Campaign,
    Report,
}

/// Flag values that override the config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ScanMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub self_test: bool,
}

/// Everything a command needs to run; replaying one re-runs it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub subcommand: Subcommand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigSource>,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Input logs, for `report`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
    /// Data directory in effect, if the embedded tables were shadowed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub record: String,
    pub tool_version: String,
    #[serde(flatten)]
    pub invocation: Invocation,
    /// Parsed view of the config text, for reading without a TOML parser.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config_snapshot: serde_json::Value,
    /// Effective seed after flags and config were combined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
    /// Set when this run re-executed an earlier manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_of: Option<PathBuf>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn new(invocation: Invocation, seed: Option<u64>, started: u128, outputs: Vec<PathBuf>) -> Self {
        let config_snapshot = invocation
            .config
            .as_ref()
            .map_or(serde_json::Value::Null, ConfigSource::snapshot);
        Self {
            record: "manifest".into(),
            tool_version: fallout_core::VERSION.into(),
            invocation,
            config_snapshot,
            seed,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            outputs,
            replay_of: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::usage(format!("{}:{}: {e}", path.display(), e.line()))
        })
    }
}

/// Where the manifest of a run goes: next to the main output, or stderr.
pub fn manifest_path(out: Option<&Path>) -> Option<PathBuf> {
    out.map(|o| {
        let mut s = o.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    })
}

pub fn write(manifest: &RunManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    match manifest_path(manifest.invocation.out.as_deref()) {
        Some(path) => {
            std::fs::write(&path, text + "\n").map_err(|e| CliError::write_failed(&path, e))
        }
        None => {
            eprintln!("{}", serde_json::to_string(manifest).expect("manifest serializes"));
            Ok(())
        }
    }
}

//! Embedded data files and the directory override.
//!
//! Every constant the models use lives in a TOML file under `data/`.
//! The files are compiled in, and a directory named by
//! `FALLOUT_DATA_DIR` (or passed explicitly) can shadow any of them.

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const DATA_DIR_ENV: &str = "FALLOUT_DATA_DIR";

pub const ISOTOPES: &str = "isotopes.toml";
pub const LEAD_ATTENUATION: &str = "lead_attenuation.toml";
pub const SI_REACTIONS: &str = "si_reactions.toml";
pub const DEVICES: &str = "devices.toml";
pub const CALIBRATION: &str = "calibration.toml";
pub const SPRAY_SCENARIOS: &str = "spray_scenarios.toml";
pub const FIXTURES: &str = "fixtures.toml";

const EMBEDDED: &[(&str, &str)] = &[
    (ISOTOPES, include_str!("../data/isotopes.toml")),
    (LEAD_ATTENUATION, include_str!("../data/lead_attenuation.toml")),
    (SI_REACTIONS, include_str!("../data/si_reactions.toml")),
    (DEVICES, include_str!("../data/devices.toml")),
    (CALIBRATION, include_str!("../data/calibration.toml")),
    (SPRAY_SCENARIOS, include_str!("../data/spray_scenarios.toml")),
    (FIXTURES, include_str!("../data/fixtures.toml")),
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown data file `{0}`")]
    UnknownFile(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {file}: {message}")]
    Parse { file: String, message: String },
    #[error("{file}: {message}")]
    Invalid { file: String, message: String },
}

/// Source of data files: the embedded defaults, optionally shadowed by a
/// directory on disk.
#[derive(Debug, Clone, Default)]
pub struct DataSource {
    dir: Option<PathBuf>,
}

impl DataSource {
    pub fn embedded() -> Self {
        Self { dir: None }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    /// Honors `FALLOUT_DATA_DIR` when set and non-empty.
    pub fn from_env() -> Self {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::with_dir(dir),
            _ => Self::embedded(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn read(&self, name: &str) -> Result<Cow<'static, str>, DataError> {
        let embedded = embedded(name).ok_or_else(|| DataError::UnknownFile(name.to_string()))?;
        if let Some(dir) = &self.dir {
            let path = dir.join(name);
            if path.exists() {
                return std::fs::read_to_string(&path)
                    .map(Cow::Owned)
                    .map_err(|source| DataError::Io { path, source });
            }
        }
        Ok(Cow::Borrowed(embedded))
    }

    pub fn parse<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T, DataError> {
        let text = self.read(name)?;
        toml::from_str(&text).map_err(|e| DataError::Parse {
            file: name.to_string(),
            message: e.to_string(),
        })
    }
}

pub fn embedded(name: &str) -> Option<&'static str> {
    EMBEDDED
        .iter()
        .find(|(file, _)| *file == name)
        .map(|(_, text)| *text)
}

//! Config files: TOML with one section per concern. Every parse or
//! validation error names the file and, where possible, the line.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fallout_core::exploitlab::{FixtureParams, Placement, SprayScenario};
use fallout_core::memmodel::TestPattern;

use crate::error::CliError;

/// A config file's text plus where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSource {
    /// Shown in diagnostics.
    pub name: PathBuf,
    /// Relative paths inside the config resolve against this.
    pub dir: PathBuf,
    pub text: String,
}

impl ConfigSource {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(Self {
            name: path.to_path_buf(),
            dir,
            text,
        })
    }

    /// Config synthesized from flags.
    pub fn inline(text: String) -> Self {
        Self {
            name: PathBuf::from("<flags>"),
            dir: PathBuf::from("."),
            text,
        }
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        toml::from_str(&self.text).map_err(|e| {
            let line = e.span().map(|s| line_at(&self.text, s.start));
            CliError::at_line(&self.name, line, e.message())
        })
    }

    /// Error pinned to the first line assigning `key`.
    pub fn error_at(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        CliError::at_line(&self.name, line_of_key(&self.text, key), msg)
    }

    /// Parsed table for the manifest snapshot.
    pub fn snapshot(&self) -> serde_json::Value {
        toml::from_str::<toml::Table>(&self.text)
            .ok()
            .and_then(|t| serde_json::to_value(t).ok())
            .unwrap_or(serde_json::Value::Null)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

fn line_at(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

// ---- simulate ----------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub source: SourceSection,
    pub device: DeviceSection,
    pub exposure: ExposureSection,
    #[serde(default)]
    pub shield: ShieldSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    /// Isotope name; leave out for a background-only run.
    pub isotope: Option<String>,
    pub ambient_per_day_per_gib: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub preset: String,
    pub test_region_bytes: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureSection {
    pub pattern: TestPattern,
    pub duration_s: f64,
    pub seed: Option<u64>,
    pub distance_cm: Option<f64>,
    /// Replay a session whose flip count is known.
    pub flip_count: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShieldSection {
    #[serde(default)]
    pub lead_mm: f64,
    /// Covered byte range; both absent means the whole device.
    pub start: Option<u64>,
    pub end: Option<u64>,
}

// ---- scan --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Live,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockPolicy {
    /// Lock if the host allows it, warn otherwise.
    #[default]
    Try,
    Require,
    Off,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanFile {
    pub mode: Option<ScanMode>,
    #[serde(default)]
    pub scan: ScanSection,
    pub replay: Option<ReplaySection>,
    pub live: Option<LiveSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub read_rate_bytes_per_s: Option<f64>,
    #[serde(default)]
    pub rewrite_on_detect: bool,
    /// Defaults to the logged exposure's duration in replay mode.
    pub duration_s: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub log: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveSection {
    pub region_bytes: u64,
    #[serde(default = "default_live_pattern")]
    pub pattern: TestPattern,
    #[serde(default)]
    pub lock: LockPolicy,
    pub self_test_offset: Option<u64>,
    #[serde(default)]
    pub self_test_bit: u8,
    #[serde(default = "default_self_test_delay")]
    pub self_test_delay_ms: u64,
}

fn default_live_pattern() -> TestPattern {
    TestPattern::ONES
}

fn default_self_test_delay() -> u64 {
    200
}

// ---- estimate ----------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateFile {
    pub scenario: ScenarioRef,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Named(String),
    Inline(Box<SprayScenario>),
}

// ---- campaign ----------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignFile {
    pub campaign: CampaignSection,
    #[serde(default)]
    pub flips: FlipsSection,
    #[serde(default)]
    pub fixture: FixtureOverrides,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSection {
    /// A named fixture from the data files, or a bare fixture kind.
    pub fixture: String,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    /// Also write one JSON line per trial.
    #[serde(default)]
    pub per_trial: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipsSection {
    pub count: Option<u32>,
    pub poisson_mean: Option<f64>,
    pub calibrated: Option<CalibratedFlips>,
    #[serde(default)]
    pub placement: Placement,
}

/// Poisson mean taken from the calibrated rate of a lab exposure.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratedFlips {
    pub isotope: String,
    pub pattern: TestPattern,
    pub duration_s: f64,
    pub region_gib: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureOverrides {
    pub phys_bytes: Option<u64>,
    pub spray_fraction: Option<f64>,
    pub layout_seed: Option<u64>,
}

impl FixtureOverrides {
    pub fn apply(&self, mut p: FixtureParams) -> FixtureParams {
        if let Some(v) = self.phys_bytes {
            p.phys_bytes = v;
        }
        if let Some(v) = self.spray_fraction {
            p.spray_fraction = v;
        }
        if let Some(v) = self.layout_seed {
            p.layout_seed = v;
        }
        p
    }
}

//! Analytic page-table-spray hit probability.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::LabError;
use crate::datafiles::{self, DataError, DataSource};

/// How many flips the exposure delivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FlipExposure {
    Count { expected_flips: f64 },
    Rate { rate_per_s: f64, duration_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprayScenario {
    pub total_memory_bytes: u64,
    pub sprayed_bytes: u64,
    pub page_size_bytes: u64,
    pub pte_size_bytes: u64,
    /// Bits of one sprayed entry whose flip hands the attacker a
    /// writable view of a page table.
    pub sensitive_bits_per_pte: u32,
    #[serde(flatten)]
    pub flips: FlipExposure,
    pub refresh_interval_ms: f64,
    /// Multiplies the expected flip count. Stays at 1.0 unless a refresh
    /// de-rating is being explored; nothing in the model sets it.
    #[serde(default = "one")]
    pub rate_derating: f64,
}

fn one() -> f64 {
    1.0
}

impl SprayScenario {
    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::InvalidScenario(m));
        if self.total_memory_bytes == 0 || self.page_size_bytes == 0 || self.pte_size_bytes == 0 {
            return bad("memory, page and entry sizes must be positive".into());
        }
        if self.sprayed_bytes > self.total_memory_bytes {
            return bad(format!(
                "sprayed {} bytes exceeds total {}",
                self.sprayed_bytes, self.total_memory_bytes
            ));
        }
        if self.sensitive_bits_per_pte as u64 > 8 * self.pte_size_bytes {
            return bad(format!(
                "{} sensitive bits do not fit a {}-byte entry",
                self.sensitive_bits_per_pte, self.pte_size_bytes
            ));
        }
        if !(self.refresh_interval_ms > 0.0) {
            return bad("refresh interval must be positive".into());
        }
        if !(self.rate_derating >= 0.0 && self.rate_derating.is_finite()) {
            return bad("rate de-rating must be a non-negative number".into());
        }
        match self.flips {
            FlipExposure::Count { expected_flips } if !(expected_flips >= 0.0 && expected_flips.is_finite()) => {
                bad(format!("expected flips must be non-negative, got {expected_flips}"))
            }
            FlipExposure::Rate { rate_per_s, duration_s }
                if !(rate_per_s >= 0.0 && rate_per_s.is_finite() && duration_s >= 0.0 && duration_s.is_finite()) =>
            {
                bad("rate and duration must be non-negative".into())
            }
            _ => Ok(()),
        }
    }

    pub fn expected_flips(&self) -> f64 {
        let n = match self.flips {
            FlipExposure::Count { expected_flips } => expected_flips,
            FlipExposure::Rate { rate_per_s, duration_s } => rate_per_s * duration_s,
        };
        n * self.rate_derating
    }

    /// Mean seconds between flips, when the exposure is given as a rate.
    pub fn seconds_per_flip(&self) -> Option<f64> {
        match self.flips {
            FlipExposure::Rate { rate_per_s, .. } => {
                let r = rate_per_s * self.rate_derating;
                Some(if r > 0.0 { 1.0 / r } else { f64::INFINITY })
            }
            FlipExposure::Count { .. } => None,
        }
    }

    /// Share of all memory bits that are sensitive entry bits.
    pub fn sensitive_fraction(&self) -> f64 {
        let entries = self.sprayed_bytes as f64 / self.pte_size_bytes as f64;
        let sensitive = entries * self.sensitive_bits_per_pte as f64;
        (sensitive / (self.total_memory_bytes as f64 * 8.0)).min(1.0)
    }
}

/// Probability that at least one of the exposure's flips lands on a
/// sensitive entry bit, treating flips as independent and uniform over
/// memory: `1 - (1 - f)^N`.
pub fn spray_hit_probability(s: &SprayScenario) -> f64 {
    let n = s.expected_flips();
    let f = s.sensitive_fraction();
    if n == 0.0 || f == 0.0 {
        return 0.0;
    }
    if f >= 1.0 {
        return 1.0;
    }
    -(n * (-f).ln_1p()).exp_m1()
}

#[derive(Debug, Deserialize)]
struct ScenarioFile {
    scenario: BTreeMap<String, SprayScenario>,
}

/// Named scenarios from `spray_scenarios.toml`.
pub fn load_scenarios(source: &DataSource) -> Result<BTreeMap<String, SprayScenario>, DataError> {
    let file: ScenarioFile = source.parse(datafiles::SPRAY_SCENARIOS)?;
    for (name, s) in &file.scenario {
        s.validate().map_err(|e| DataError::Invalid {
            file: datafiles::SPRAY_SCENARIOS.into(),
            message: format!("{name}: {e}"),
        })?;
    }
    Ok(file.scenario)
}

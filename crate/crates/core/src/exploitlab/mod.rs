//! Exploitability analysis: the analytic spray model, the toy machine and
//! injection campaigns over it.

mod campaign;
mod classify;
mod machine;
mod spray;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use campaign::{
    run_campaign, run_campaign_with_trials, CampaignConfig, CampaignSummary, FlipCount,
    FlipSite, Placement, TrialRecord,
};
pub use classify::classify_outcome;
pub use machine::{
    build_fixture, load_fixtures, FixtureName, FixtureParams, MappedRange, NamedFixture,
    PageTag, Process, Pte, RangeKind, ToyMachine, BARE_METAL_FLAG_OFFSET,
    BARE_METAL_LOCKED_WORD, BARE_METAL_UNLOCK_BIT, DEFAULT_PHYS_BYTES, FRAME_SHIFT, PAGE_SIZE,
    PTES_PER_PAGE, PTE_FLAGS, PTE_PRESENT, PTE_SIZE, PTE_USER, PTE_WRITABLE,
};
pub use spray::{load_scenarios, spray_hit_probability, FlipExposure, SprayScenario};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid spray scenario: {0}")]
    InvalidScenario(String),
    #[error("unknown fixture `{0}` (expected suid_ping or bare_metal_firmware)")]
    UnknownFixture(String),
    #[error("invalid fixture: {0}")]
    InvalidFixture(String),
    #[error("physical byte {offset} outside memory of {len} bytes")]
    AddressOutOfRange { offset: u64, len: u64 },
    #[error("bit index {0} outside 0..=7")]
    BitOutOfRange(u8),
    #[error("invalid campaign: {0}")]
    InvalidCampaign(String),
}

/// Effect of the flips applied to a machine. Ordered by strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    NoEffect,
    SilentCorruption,
    CrashSegfault,
    PrivilegeEscalation,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::NoEffect,
        Outcome::SilentCorruption,
        Outcome::CrashSegfault,
        Outcome::PrivilegeEscalation,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Outcome::NoEffect => "no_effect",
            Outcome::SilentCorruption => "silent_corruption",
            Outcome::CrashSegfault => "crash_segfault",
            Outcome::PrivilegeEscalation => "privilege_escalation",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

use std::num::NonZeroUsize;
use std::thread;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::classify::classify_outcome;
use super::machine::{PageTag, ToyMachine, PAGE_SIZE};
use super::{LabError, Outcome};

/// Number of flips injected per trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipCount {
    Fixed(u32),
    Poisson(f64),
}

/// Where flips may land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Any bit of physical memory.
    #[default]
    Uniform,
    UnallocatedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub flips: FlipCount,
    #[serde(default)]
    pub placement: Placement,
    pub trials: u64,
    pub seed: u64,
}

impl CampaignConfig {
    pub fn single_flip(trials: u64, seed: u64) -> Self {
        Self {
            flips: FlipCount::Fixed(1),
            placement: Placement::Uniform,
            trials,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: &str| Err(LabError::InvalidCampaign(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if let FlipCount::Poisson(mean) = self.flips {
            if !mean.is_finite() || mean < 0.0 {
                return bad("poisson mean must be finite and non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipSite {
    pub byte_offset: u64,
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub flips: Vec<FlipSite>,
    pub outcome: Outcome,
}

/// Outcome histogram of a campaign.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub trials: u64,
    pub no_effect: u64,
    pub crash: u64,
    pub escalation: u64,
    pub silent: u64,
}

impl CampaignSummary {
    fn add(&mut self, o: Outcome) {
        self.trials += 1;
        match o {
            Outcome::NoEffect => self.no_effect += 1,
            Outcome::CrashSegfault => self.crash += 1,
            Outcome::PrivilegeEscalation => self.escalation += 1,
            Outcome::SilentCorruption => self.silent += 1,
        }
    }

    fn merge(&mut self, other: &CampaignSummary) {
        self.trials += other.trials;
        self.no_effect += other.no_effect;
        self.crash += other.crash;
        self.escalation += other.escalation;
        self.silent += other.silent;
    }

    pub fn count(&self, o: Outcome) -> u64 {
        match o {
            Outcome::NoEffect => self.no_effect,
            Outcome::CrashSegfault => self.crash,
            Outcome::PrivilegeEscalation => self.escalation,
            Outcome::SilentCorruption => self.silent,
        }
    }

    pub fn fraction(&self, o: Outcome) -> f64 {
        self.count(o) as f64 / self.trials as f64
    }
}

struct Sampler {
    phys_bits: u64,
    free_frames: Vec<u64>,
}

impl Sampler {
    fn new(m: &ToyMachine, placement: Placement) -> Result<Self, LabError> {
        let free_frames = match placement {
            Placement::Uniform => Vec::new(),
            Placement::UnallocatedOnly => {
                let f: Vec<u64> = m.frames_tagged(PageTag::Unallocated).collect();
                if f.is_empty() {
                    return Err(LabError::InvalidCampaign(
                        "fixture has no unallocated pages".into(),
                    ));
                }
                f
            }
        };
        Ok(Self {
            phys_bits: m.phys_bytes() * 8,
            free_frames,
        })
    }

    fn site(&self, rng: &mut ChaCha8Rng) -> FlipSite {
        let bit_index = if self.free_frames.is_empty() {
            rng.random_range(0..self.phys_bits)
        } else {
            let frame = self.free_frames[rng.random_range(0..self.free_frames.len())];
            frame * PAGE_SIZE * 8 + rng.random_range(0..PAGE_SIZE * 8)
        };
        FlipSite {
            byte_offset: bit_index / 8,
            bit: (bit_index % 8) as u8,
        }
    }
}

fn run_trial(m: &ToyMachine, cfg: &CampaignConfig, sampler: &Sampler, trial: u64) -> TrialRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial);
    let n = match cfg.flips {
        FlipCount::Fixed(n) => n as u64,
        FlipCount::Poisson(mean) if mean > 0.0 => {
            Poisson::new(mean).expect("validated mean").sample(&mut rng) as u64
        }
        FlipCount::Poisson(_) => 0,
    };
    let flips: Vec<FlipSite> = (0..n).map(|_| sampler.site(&mut rng)).collect();
    let mut scratch = m.clone();
    for f in &flips {
        scratch
            .toggle(f.byte_offset, f.bit)
            .expect("sampled sites lie inside memory");
    }
    TrialRecord {
        trial,
        outcome: classify_outcome(&scratch),
        flips,
    }
}

fn workers(trials: u64) -> usize {
    let cores = thread::available_parallelism().map_or(1, NonZeroUsize::get);
    cores.min(trials.div_ceil(256) as usize).max(1)
}

/// Runs `cfg.trials` independent trials. Each trial draws from its own
/// random stream, so results do not depend on how work is split across
/// threads.
pub fn run_campaign(m: &ToyMachine, cfg: &CampaignConfig) -> Result<CampaignSummary, LabError> {
    cfg.validate()?;
    let sampler = Sampler::new(m, cfg.placement)?;
    let chunks = split(cfg.trials, workers(cfg.trials));
    let parts: Vec<CampaignSummary> = thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|&(lo, hi)| {
                let sampler = &sampler;
                s.spawn(move || {
                    let mut h = CampaignSummary::default();
                    for t in lo..hi {
                        h.add(run_trial(m, cfg, sampler, t).outcome);
                    }
                    h
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut total = CampaignSummary::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Like [`run_campaign`] but also returns every trial, in trial order.
pub fn run_campaign_with_trials(
    m: &ToyMachine,
    cfg: &CampaignConfig,
) -> Result<(CampaignSummary, Vec<TrialRecord>), LabError> {
    cfg.validate()?;
    let sampler = Sampler::new(m, cfg.placement)?;
    let chunks = split(cfg.trials, workers(cfg.trials));
    let records: Vec<TrialRecord> = thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|&(lo, hi)| {
                let sampler = &sampler;
                s.spawn(move || {
                    (lo..hi)
                        .map(|t| run_trial(m, cfg, sampler, t))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect()
    });
    let mut summary = CampaignSummary::default();
    for r in &records {
        summary.add(r.outcome);
    }
    Ok((summary, records))
}

fn split(n: u64, parts: usize) -> Vec<(u64, u64)> {
    let parts = parts as u64;
    (0..parts)
        .map(|i| (n * i / parts, n * (i + 1) / parts))
        .filter(|(lo, hi)| lo < hi)
        .collect()
}

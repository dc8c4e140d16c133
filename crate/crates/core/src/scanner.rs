//! Sequential memory scanner and its detection-miss model.
//!
//! The measurement loop fills a region with a pattern, then walks it byte
//! by byte forever, comparing each byte with what it expects. Because the
//! walk is sequential, a flip is only seen when the head next reaches its
//! offset; [`run_session`] replays that on a virtual clock, and
//! [`live_scan`] runs the same loop against a real allocation.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memmodel::{
    DetectionStatus, FlipEvent, MemError, MemoryRegion, RealBuffer, TestPattern, GIB,
};

/// 1 GiB every 10 s.
pub const DEFAULT_READ_RATE_BYTES_PER_S: f64 = GIB as f64 / 10.0;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("invalid scan config: {0}")]
    InvalidConfig(String),
    #[error("flips not sorted by time: event {index} at {t_s} s precedes its predecessor")]
    Unsorted { index: usize, t_s: f64 },
    #[error("event {index}: {source}")]
    BadEvent {
        index: usize,
        #[source]
        source: MemError,
    },
    #[error(transparent)]
    Memory(#[from] MemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub region_bytes: u64,
    pub pattern: TestPattern,
    pub read_rate_bytes_per_s: f64,
    /// Refill a byte with the pattern as soon as a mismatch is logged.
    pub rewrite_on_detect: bool,
    pub total_duration_s: f64,
}

impl ScanConfig {
    pub fn new(region_bytes: u64, pattern: TestPattern, total_duration_s: f64) -> Self {
        Self {
            region_bytes,
            pattern,
            read_rate_bytes_per_s: DEFAULT_READ_RATE_BYTES_PER_S,
            rewrite_on_detect: false,
            total_duration_s,
        }
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        let bad = |m: String| Err(ScanError::InvalidConfig(m));
        if self.region_bytes == 0 {
            return bad("region must be at least one byte".into());
        }
        if !(self.read_rate_bytes_per_s > 0.0 && self.read_rate_bytes_per_s.is_finite()) {
            return bad(format!("read rate must be positive, got {}", self.read_rate_bytes_per_s));
        }
        if !(self.total_duration_s > 0.0 && self.total_duration_s.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.total_duration_s));
        }
        Ok(())
    }

    pub fn pass_duration_s(&self) -> f64 {
        self.region_bytes as f64 / self.read_rate_bytes_per_s
    }

    /// Time at which the head reads `offset` during pass `pass`.
    pub fn visit_time(&self, pass: u64, offset: u64) -> f64 {
        let bytes = pass as u128 * self.region_bytes as u128 + offset as u128;
        bytes as f64 / self.read_rate_bytes_per_s
    }

    /// First visit of `offset` strictly after `t`, as `(pass, time)`.
    pub fn next_visit(&self, offset: u64, t: f64) -> (u64, f64) {
        let est = ((t * self.read_rate_bytes_per_s - offset as f64) / self.region_bytes as f64).floor();
        let mut pass = if est > 0.0 { est as u64 } else { 0 };
        while pass > 0 && self.visit_time(pass - 1, offset) > t {
            pass -= 1;
        }
        while self.visit_time(pass, offset) <= t {
            pass += 1;
        }
        (pass, self.visit_time(pass, offset))
    }

    /// Passes whose last byte is read before the session ends.
    pub fn passes_completed(&self) -> u64 {
        let est = (self.total_duration_s / self.pass_duration_s()).floor();
        let mut n = if est > 0.0 { est as u64 } else { 0 };
        // pass k ends when offset region-1 of pass k is read
        let ends = |k: u64| self.visit_time(k, self.region_bytes - 1) < self.total_duration_s;
        while n > 0 && !ends(n - 1) {
            n -= 1;
        }
        while ends(n) {
            n += 1;
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub byte_offset: u64,
    pub observed: u8,
}

pub fn fill<R: MemoryRegion + ?Sized>(region: &mut R, pattern: TestPattern) {
    region.fill_with(pattern.byte());
}

/// Every byte that differs from the pattern, in ascending offset order.
pub fn scan_pass<R: MemoryRegion + ?Sized>(region: &R, pattern: TestPattern) -> Vec<Mismatch> {
    (0..region.len())
        .filter_map(|i| {
            let observed = region.read(i);
            (observed != pattern.byte()).then_some(Mismatch {
                byte_offset: i as u64,
                observed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub event: FlipEvent,
    pub detected_at_s: f64,
    /// Byte value the head read when it noticed the change.
    pub observed_byte: u8,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScanReport {
    pub detected: Vec<Detection>,
    pub missed: Vec<FlipEvent>,
    /// Pairs of strikes on one bit that cancelled before the head arrived.
    pub masked_pairs: u64,
    pub passes_completed: u64,
    pub pass_duration_s: f64,
}

impl ScanReport {
    pub fn summary(&self) -> ScanSummary {
        ScanSummary {
            record: "summary".into(),
            detected: self.detected.len() as u64,
            missed: self.missed.len() as u64,
            masked_pairs: self.masked_pairs,
            passes_completed: self.passes_completed,
            pass_duration_s: self.pass_duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub record: String,
    pub detected: u64,
    pub missed: u64,
    pub masked_pairs: u64,
    pub passes_completed: u64,
    pub pass_duration_s: f64,
}

/// Replays `flips` against a scan head moving at the configured rate.
///
/// A flip is detected at the first visit of its byte after it happened,
/// provided that visit falls inside the session and no second strike on
/// the same bit cancelled it first. Strikes are toggles: an even number
/// on one bit between two visits leaves nothing to see, and all of them
/// are missed. With an odd number the latest is credited and the rest are
/// masked. The scanner compares against the last value it recorded, so
/// with `rewrite_on_detect` off a flipped byte stays flipped and only new
/// changes are reported.
pub fn run_session(config: &ScanConfig, flips: &[FlipEvent]) -> Result<ScanReport, ScanError> {
    config.validate()?;
    for (index, ev) in flips.iter().enumerate() {
        ev.validate(config.pattern, config.region_bytes)
            .map_err(|source| ScanError::BadEvent { index, source })?;
        if index > 0 && ev.t_s() < flips[index - 1].t_s() {
            return Err(ScanError::Unsorted {
                index,
                t_s: ev.t_s(),
            });
        }
    }

    let mut by_offset: BTreeMap<u64, Vec<&FlipEvent>> = BTreeMap::new();
    for ev in flips {
        by_offset.entry(ev.byte_offset()).or_default().push(ev);
    }

    let mut report = ScanReport {
        passes_completed: config.passes_completed(),
        pass_duration_s: config.pass_duration_s(),
        ..ScanReport::default()
    };

    for (offset, events) in by_offset {
        // toggles carried in memory from earlier visits (no rewrite)
        let mut carried = 0u8;
        let mut i = 0;
        while i < events.len() {
            let (pass, at) = config.next_visit(offset, events[i].t_s());
            let mut j = i;
            while j < events.len() && config.next_visit(offset, events[j].t_s()).0 == pass {
                j += 1;
            }
            let group = &events[i..j];
            i = j;

            if at >= config.total_duration_s {
                report
                    .missed
                    .extend(group.iter().map(|e| e.with_status(DetectionStatus::Missed)));
                continue;
            }

            let mut changed = 0u8;
            for bit in 0..8u8 {
                let strikes: Vec<&FlipEvent> =
                    group.iter().copied().filter(|e| e.bit_index() == bit).collect();
                if strikes.is_empty() {
                    continue;
                }
                let odd = strikes.len() % 2 == 1;
                report.masked_pairs += (strikes.len() / 2) as u64;
                let (lost, seen) = if odd {
                    strikes.split_at(strikes.len() - 1)
                } else {
                    (&strikes[..], &[][..])
                };
                report
                    .missed
                    .extend(lost.iter().map(|e| e.with_status(DetectionStatus::Missed)));
                if let Some(ev) = seen.first() {
                    changed |= 1 << bit;
                    report.detected.push(Detection {
                        event: ev.with_status(DetectionStatus::Detected),
                        detected_at_s: at,
                        observed_byte: 0,
                    });
                }
            }
            let observed = config.pattern.byte() ^ carried ^ changed;
            for d in report.detected.iter_mut().rev() {
                if d.event.byte_offset() != offset || d.detected_at_s != at {
                    break;
                }
                d.observed_byte = observed;
            }
            if !config.rewrite_on_detect {
                carried ^= changed;
            }
        }
    }

    report.detected.sort_by(|a, b| {
        a.detected_at_s
            .total_cmp(&b.detected_at_s)
            .then(a.event.byte_offset().cmp(&b.event.byte_offset()))
            .then(a.event.bit_index().cmp(&b.event.bit_index()))
    });
    report.missed.sort_by(|a, b| {
        a.t_s()
            .total_cmp(&b.t_s())
            .then(a.byte_offset().cmp(&b.byte_offset()))
            .then(a.bit_index().cmp(&b.bit_index()))
    });
    Ok(report)
}

/// One bit toggled by a helper thread during a live scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfTest {
    pub byte_offset: usize,
    pub bit: u8,
    pub delay: Duration,
}

/// Runs the scan loop against real memory until the duration elapses.
///
/// Flip times are unknowable on hardware; each detection's `t_s` is the
/// start of the pass before the one that saw it, the earliest the flip
/// could have happened unseen. Nothing is ever reported missed.
pub fn live_scan(
    region: &RealBuffer,
    config: &ScanConfig,
    self_test: Option<SelfTest>,
) -> Result<ScanReport, ScanError> {
    config.validate()?;
    let len = region.len();
    if len as u64 != config.region_bytes {
        return Err(ScanError::InvalidConfig(format!(
            "region is {len} bytes but config expects {}",
            config.region_bytes
        )));
    }
    if let Some(st) = self_test {
        if st.byte_offset >= len || st.bit > 7 {
            return Err(ScanError::InvalidConfig(format!(
                "self-test target {}:{} outside region",
                st.byte_offset, st.bit
            )));
        }
    }

    let pattern = config.pattern;
    for i in 0..len {
        region.store_shared(i, pattern.byte());
    }

    let writer_done = AtomicBool::new(self_test.is_none());
    let deadline = Duration::from_secs_f64(config.total_duration_s);
    let mut report = ScanReport::default();

    std::thread::scope(|scope| {
        if let Some(st) = self_test {
            let done = &writer_done;
            scope.spawn(move || {
                std::thread::sleep(st.delay);
                region.toggle_shared(st.byte_offset, st.bit);
                done.store(true, Ordering::SeqCst);
            });
        }

        let start = Instant::now();
        // bytes whose last recorded value differs from the pattern
        let mut expected: HashMap<usize, u8> = HashMap::new();
        let mut prev_pass_start = 0.0;
        loop {
            let writer_was_done = writer_done.load(Ordering::SeqCst);
            let pass_start = start.elapsed().as_secs_f64();
            for i in 0..len {
                let observed = region.load(i);
                let want = expected.get(&i).copied().unwrap_or(pattern.byte());
                if observed == want {
                    continue;
                }
                let at = start.elapsed().as_secs_f64();
                let diff = observed ^ want;
                for bit in (0..8u8).filter(|b| diff >> b & 1 == 1) {
                    let event = FlipEvent::new(prev_pass_start, i as u64, bit, pattern, len as u64)
                        .expect("offset and bit are in range");
                    report.detected.push(Detection {
                        event: event.with_status(DetectionStatus::Detected),
                        detected_at_s: at,
                        observed_byte: observed,
                    });
                }
                if config.rewrite_on_detect {
                    region.store_shared(i, pattern.byte());
                    expected.remove(&i);
                } else if observed == pattern.byte() {
                    expected.remove(&i);
                } else {
                    expected.insert(i, observed);
                }
            }
            report.passes_completed += 1;
            prev_pass_start = pass_start;
            if start.elapsed() >= deadline && writer_was_done {
                break;
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        report.pass_duration_s = elapsed / report.passes_completed as f64;
    });

    Ok(report)
}

//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the code under test beyond reading raw state,
//! so agreement between the two is meaningful.

#![allow(dead_code)]

use std::collections::BTreeMap;

/// Relative difference, treating two zeros as equal.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at alpha = 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

// ---- page tables ---------------------------------------------------------

pub const PAGE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OraclePte {
    pub present: bool,
    pub writable: bool,
    pub user: bool,
    pub frame: u64,
    pub reserved_clear: bool,
}

/// Decodes an entry from its eight raw little-endian bytes.
pub fn decode_pte(bytes: [u8; 8], frame_bits: u32) -> OraclePte {
    let raw = bytes
        .iter()
        .rev()
        .fold(0u64, |acc, &b| (acc << 8) | b as u64);
    let frame_field = raw >> 12;
    let frame = frame_field & ((1u64 << frame_bits) - 1);
    let high = frame_field >> frame_bits;
    let low_reserved = (raw >> 3) & 0x1FF;
    OraclePte {
        present: raw & 1 == 1,
        writable: (raw >> 1) & 1 == 1,
        user: (raw >> 2) & 1 == 1,
        frame,
        reserved_clear: high == 0 && low_reserved == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Walk {
    Fault,
    Mapped { frame: u64, writable: bool },
}

/// User-mode translation of `vpage` through a list of table frames.
/// `read` returns a physical byte.
pub fn walk_user(
    read: impl Fn(u64) -> u8,
    tables: &[u64],
    vpage: u64,
    frame_bits: u32,
    frames: u64,
) -> Walk {
    let Some(&table) = tables.get((vpage / 512) as usize) else {
        return Walk::Fault;
    };
    let base = table * PAGE + (vpage % 512) * 8;
    let mut bytes = [0u8; 8];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = read(base + i as u64);
    }
    let pte = decode_pte(bytes, frame_bits);
    if !pte.present || !pte.user || !pte.reserved_clear || pte.frame >= frames {
        return Walk::Fault;
    }
    Walk::Mapped {
        frame: pte.frame,
        writable: pte.writable,
    }
}

// ---- scanner ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strike {
    pub t: f64,
    pub offset: u64,
    pub bit: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDetection {
    pub strike: usize,
    pub at: f64,
    pub observed: u8,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct OracleVerdict {
    pub detected: Vec<OracleDetection>,
    pub missed: Vec<usize>,
}

/// Replays strikes against a head that reads byte `o` of pass `k` at
/// `(k * region + o) / rate`, keeping real byte contents per touched
/// offset. A strike at exactly a visit instant lands after the read.
pub fn scan_oracle(
    strikes: &[Strike],
    region: u64,
    rate: f64,
    duration: f64,
    pattern: u8,
    rewrite: bool,
) -> OracleVerdict {
    let mut by_offset: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in strikes.iter().enumerate() {
        by_offset.entry(s.offset).or_default().push(i);
    }
    let mut out = OracleVerdict::default();
    for (offset, idxs) in by_offset {
        let mut current = pattern;
        let mut recorded = pattern;
        let mut pending: Vec<usize> = Vec::new();
        let mut next = 0;
        let mut pass: u64 = 0;
        loop {
            let visit = (pass as u128 * region as u128 + offset as u128) as f64 / rate;
            while next < idxs.len() && strikes[idxs[next]].t < visit {
                let s = strikes[idxs[next]];
                current ^= 1 << s.bit;
                pending.push(idxs[next]);
                next += 1;
            }
            if visit >= duration {
                out.missed.append(&mut pending);
                out.missed.extend(idxs[next..].iter().copied());
                break;
            }
            let diff = current ^ recorded;
            for bit in 0..8u8 {
                let on_bit: Vec<usize> = pending
                    .iter()
                    .copied()
                    .filter(|&i| strikes[i].bit == bit)
                    .collect();
                if on_bit.is_empty() {
                    continue;
                }
                if diff >> bit & 1 == 1 {
                    let last = *on_bit.last().unwrap();
                    out.detected.push(OracleDetection {
                        strike: last,
                        at: visit,
                        observed: current,
                    });
                    out.missed.extend(on_bit[..on_bit.len() - 1].iter().copied());
                } else {
                    out.missed.extend(on_bit);
                }
            }
            pending.clear();
            if diff != 0 && rewrite {
                current = pattern;
            }
            recorded = current;
            if next == idxs.len() && pending.is_empty() {
                break;
            }
            pass += 1;
        }
    }
    out.missed.sort_unstable();
    out.detected.sort_by_key(|d| d.strike);
    out
}

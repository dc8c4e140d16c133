mod common;

use common::{scan_oracle, OracleVerdict, Strike};
use fallout_core::memmodel::{FlipEvent, MemoryRegion, SimulatedRegion, TestPattern};
use fallout_core::scanner::{fill, run_session, scan_pass, ScanConfig, ScanReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn events(strikes: &[Strike], pattern: TestPattern, region: u64) -> Vec<FlipEvent> {
    strikes
        .iter()
        .map(|s| FlipEvent::new(s.t, s.offset, s.bit, pattern, region).unwrap())
        .collect()
}

fn index_of(strikes: &[Strike], ev: &FlipEvent) -> usize {
    strikes
        .iter()
        .position(|s| s.t == ev.t_s() && s.offset == ev.byte_offset() && s.bit == ev.bit_index())
        .expect("reported event was injected")
}

/// Maps a report back onto strike indices so it compares with the oracle.
fn as_verdict(strikes: &[Strike], report: &ScanReport) -> OracleVerdict {
    let mut v = OracleVerdict::default();
    for d in &report.detected {
        v.detected.push(common::OracleDetection {
            strike: index_of(strikes, &d.event),
            at: d.detected_at_s,
            observed: d.observed_byte,
        });
    }
    v.missed = report.missed.iter().map(|e| index_of(strikes, e)).collect();
    v.missed.sort_unstable();
    v.detected.sort_by_key(|d| d.strike);
    v
}

fn random_config(rng: &mut ChaCha8Rng) -> ScanConfig {
    let region = rng.random_range(1..5_000u64);
    let pattern = TestPattern::CANONICAL[rng.random_range(0..3)];
    let rate = rng.random_range(100.0..10_000.0);
    let pass = region as f64 / rate;
    let mut cfg = ScanConfig::new(region, pattern, pass * rng.random_range(0.05..40.0));
    cfg.read_rate_bytes_per_s = rate;
    cfg.rewrite_on_detect = rng.random();
    cfg
}

fn random_strikes(rng: &mut ChaCha8Rng, cfg: &ScanConfig, n: usize, hot: bool) -> Vec<Strike> {
    // `hot` crowds strikes onto a few bytes so repeats and masking happen
    let offsets: Vec<u64> = (0..3).map(|_| rng.random_range(0..cfg.region_bytes)).collect();
    let mut s: Vec<Strike> = (0..n)
        .map(|_| Strike {
            t: rng.random_range(0.0..cfg.total_duration_s * 1.05),
            offset: if hot {
                offsets[rng.random_range(0..offsets.len())]
            } else {
                rng.random_range(0..cfg.region_bytes)
            },
            bit: if hot { rng.random_range(0..2) } else { rng.random_range(0..8) },
        })
        .collect();
    s.sort_by(|a, b| a.t.total_cmp(&b.t));
    s
}

#[test]
fn single_flip_verdicts_match_the_head_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..1_000 {
        let cfg = random_config(&mut rng);
        let strikes = random_strikes(&mut rng, &cfg, 1, false);
        let report = run_session(&cfg, &events(&strikes, cfg.pattern, cfg.region_bytes)).unwrap();
        let oracle = scan_oracle(
            &strikes,
            cfg.region_bytes,
            cfg.read_rate_bytes_per_s,
            cfg.total_duration_s,
            cfg.pattern.byte(),
            cfg.rewrite_on_detect,
        );
        assert_eq!(as_verdict(&strikes, &report), oracle, "{cfg:?} {strikes:?}");
        assert_eq!(report.detected.len() + report.missed.len(), 1);
    }
}

#[test]
fn multi_flip_sessions_match_the_head_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1_000 {
        let cfg = random_config(&mut rng);
        let n = rng.random_range(0..40);
        let strikes = random_strikes(&mut rng, &cfg, n, case % 2 == 0);
        let report = run_session(&cfg, &events(&strikes, cfg.pattern, cfg.region_bytes)).unwrap();
        let oracle = scan_oracle(
            &strikes,
            cfg.region_bytes,
            cfg.read_rate_bytes_per_s,
            cfg.total_duration_s,
            cfg.pattern.byte(),
            cfg.rewrite_on_detect,
        );
        assert_eq!(as_verdict(&strikes, &report), oracle, "case {case}");
        assert_eq!(report.detected.len() + report.missed.len(), strikes.len());
    }
}

#[test]
fn truncated_session_miss_rate() {
    // less than one pass: a flip is seen only if the head has yet to
    // reach its byte, and reaches it before the end
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut missed = 0;
    let mut expected = 0.0;
    let trials = 1_000;
    for _ in 0..trials {
        let region = 1_000_000;
        let frac = rng.random_range(0.1..0.9);
        let mut cfg = ScanConfig::new(region, TestPattern::ONES, frac * 10.0);
        cfg.read_rate_bytes_per_s = region as f64 / 10.0;
        let strikes = vec![Strike {
            t: rng.random_range(0.0..cfg.total_duration_s),
            offset: rng.random_range(0..region),
            bit: rng.random_range(0..8),
        }];
        let report = run_session(&cfg, &events(&strikes, cfg.pattern, region)).unwrap();
        let oracle = scan_oracle(&strikes, region, cfg.read_rate_bytes_per_s, cfg.total_duration_s, 0xFF, false);
        assert_eq!(as_verdict(&strikes, &report), oracle);
        missed += report.missed.len();
        // P(head behind the byte at t and reaching it before the end)
        // for t ~ U(0, D), offset ~ U(0, 1) in units of region: D/2
        expected += 1.0 - frac / 2.0;
    }
    let p = expected / trials as f64;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    let rate = missed as f64 / trials as f64;
    assert!((rate - p).abs() < 4.0 * sigma, "miss rate {rate} vs {p}");
}

#[test]
fn no_misses_with_two_passes_left_and_no_rewrite() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..500 {
        let mut cfg = random_config(&mut rng);
        cfg.rewrite_on_detect = false;
        let passes = rng.random_range(2.0..20.0);
        cfg.total_duration_s = cfg.pass_duration_s() * passes;
        let t = rng.random_range(0.0..cfg.total_duration_s - cfg.pass_duration_s());
        let strikes = vec![Strike {
            t,
            offset: rng.random_range(0..cfg.region_bytes),
            bit: rng.random_range(0..8),
        }];
        let report = run_session(&cfg, &events(&strikes, cfg.pattern, cfg.region_bytes)).unwrap();
        assert!(report.missed.is_empty());
        let d = &report.detected[0];
        assert!(d.detected_at_s > d.event.t_s());
    }
}

#[test]
fn masked_pair_between_visits() {
    let mut cfg = ScanConfig::new(1000, TestPattern::ONES, 100.0);
    cfg.read_rate_bytes_per_s = 100.0;
    cfg.rewrite_on_detect = true;
    // byte 500 is read at 5 s, 15 s, ...; both strikes land in between
    let flips = [
        FlipEvent::new(6.0, 500, 2, cfg.pattern, 1000).unwrap(),
        FlipEvent::new(7.0, 500, 2, cfg.pattern, 1000).unwrap(),
    ];
    let report = run_session(&cfg, &flips).unwrap();
    assert!(report.detected.is_empty());
    assert_eq!(report.missed.len(), 2);
    assert_eq!(report.masked_pairs, 1);
}

#[test]
fn scan_pass_xor_oracle() {
    let mut r = SimulatedRegion::new(4096);
    fill(&mut r, TestPattern::ONES);
    assert!(scan_pass(&r, TestPattern::ONES).is_empty());
    r.toggle_bit(100, 5);
    let m = scan_pass(&r, TestPattern::ONES);
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].byte_offset, 100);
    assert_eq!(m[0].observed, 0xDF);
    assert_eq!((m[0].observed ^ 0xFF).trailing_zeros(), 5);
    r.toggle_bit(300, 1);
    r.toggle_bit(300, 6);
    let m = scan_pass(&r, TestPattern::ONES);
    assert_eq!(m.len(), 2);
    assert_eq!((m[1].observed ^ 0xFF).count_ones(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn conservation_and_ordering(seed in any::<u64>(), n in 0usize..60, hot in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut rng);
        let strikes = random_strikes(&mut rng, &cfg, n, hot);
        let report = run_session(&cfg, &events(&strikes, cfg.pattern, cfg.region_bytes)).unwrap();
        prop_assert_eq!(report.detected.len() + report.missed.len(), n);
        let v = as_verdict(&strikes, &report);
        let mut all: Vec<usize> = v.detected.iter().map(|d| d.strike).chain(v.missed.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert!(report.detected.windows(2).all(|w| w[0].detected_at_s <= w[1].detected_at_s));
        prop_assert!(report.detected.iter().all(|d| d.detected_at_s >= d.event.t_s()));
        let law = cfg.region_bytes as f64 / cfg.read_rate_bytes_per_s;
        prop_assert!((report.pass_duration_s - law).abs() <= 1e-9 * law);
    }
}

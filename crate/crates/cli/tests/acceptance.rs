#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{decode_pte, rel_diff, scan_oracle, walk_user, OracleDetection, OracleVerdict, Strike, Walk, PAGE};
use fallout_core::datafiles::DataSource;
use fallout_core::exploitlab::{
    build_fixture, classify_outcome, load_fixtures, load_scenarios, run_campaign,
    spray_hit_probability, CampaignConfig, FixtureName, FixtureParams, FlipCount, FlipExposure,
    Outcome, PageTag, Placement, RangeKind, SprayScenario, ToyMachine,
};
use fallout_core::fluxsim::{calibrate, load_observations, simulate_exposure, ExposurePlan, FlipRateModel};
use fallout_core::memmodel::{make_device, DevicePreset, FlipEvent, TestPattern};
use fallout_core::physics::{decay_fraction, EmissionLine, Ejectile, EnergyUnit, Particle, PhysicsData, SiIsotope};
use fallout_core::scanner::{run_session, ScanConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fallout(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fallout"))
        .args(args)
        .current_dir(root())
        .env_remove("FALLOUT_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn model() -> FlipRateModel {
    calibrate(&load_observations(&DataSource::embedded()).unwrap()).unwrap().model
}

fn mean_count(iso: &str, pattern: TestPattern, seeds: u64) -> f64 {
    let m = model();
    let d = PhysicsData::builtin();
    let plan = ExposurePlan::new(
        d.isotope(iso).unwrap().clone(),
        make_device(DevicePreset::T41p1gb),
        pattern,
        1200.0,
        0,
    );
    let total: usize = (0..seeds)
        .map(|s| simulate_exposure(&plan.clone().with_seed(s), &m, &d.attenuation).unwrap().len())
        .sum();
    total as f64 / seeds as f64
}

fn within_poisson_band(iso: &str, lambda: f64) -> Check {
    let n = 10_000;
    let mu = mean_count(iso, TestPattern::ONES, n);
    let band = 4.0 * lambda.sqrt() / (n as f64).sqrt();
    ensure((mu - lambda).abs() <= band, || format!("{iso} mean {mu:.4} outside {lambda} ± {band:.4}"))?;
    Ok(format!("{iso}/0xFF mean {mu:.4}, band ±{band:.4}"))
}

fn criterion_1() -> Check {
    within_poisson_band("Co-60", 27.0)
}

fn criterion_2() -> Check {
    let band = within_poisson_band("Cs-137", 7.0)?;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.jsonl");
    let mut args = vec!["report".to_string()];
    for p in ["cobalt_ff", "cobalt_00", "cobalt_41", "cesium_ff", "cesium_00", "cesium_41"] {
        args.push(format!("fixtures/{p}.jsonl"));
    }
    args.extend(["--out".into(), out.display().to_string()]);
    let run = fallout(&args.iter().map(String::as_str).collect::<Vec<_>>());
    ensure(run.status.success(), || format!("report failed: {}", String::from_utf8_lossy(&run.stderr)))?;
    let mut co = None;
    let mut cs = None;
    for line in std::fs::read_to_string(&out).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["record"] == "total" {
            match v["element"].as_str() {
                Some("Co-60") => co = v["flips"].as_u64(),
                Some("Cs-137") => cs = v["flips"].as_u64(),
                _ => {}
            }
        }
    }
    ensure(co == Some(68) && cs == Some(13), || format!("totals {co:?} / {cs:?}"))?;
    Ok(format!("{band}; report totals Co-60 68, Cs-137 13"))
}

fn criterion_3() -> Check {
    let m = model();
    let d = PhysicsData::builtin();
    let mut runs = 0;
    for preset in [DevicePreset::Rpi4_4gb, DevicePreset::Rpi4b8gb] {
        for iso in ["Co-60", "Cs-137"] {
            let iso = d.isotope(iso).unwrap();
            ensure(
                iso.lines.iter().filter(|l| l.particle == Particle::Gamma).all(|l| l.energy_mev <= 1.4),
                || format!("{} has a gamma line above 1.4 MeV", iso.name),
            )?;
            for pattern in TestPattern::CANONICAL {
                let plan = ExposurePlan::new(iso.clone(), make_device(preset), pattern, 1200.0, 0);
                for seed in 0..1_000 {
                    let ev = simulate_exposure(&plan.clone().with_seed(seed), &m, &d.attenuation).unwrap();
                    ensure(ev.is_empty(), || format!("{} flips on {preset:?} seed {seed}", ev.len()))?;
                    runs += 1;
                }
            }
        }
    }
    Ok(format!("{runs} exposures, all empty"))
}

/// Analytic scenario for uniform flips on a toy machine.
fn scenario_for(m: &ToyMachine, flips: f64) -> SprayScenario {
    SprayScenario {
        total_memory_bytes: m.phys_bytes(),
        sprayed_bytes: m.attacker().unwrap().page_table.len() as u64 * PAGE,
        page_size_bytes: PAGE,
        pte_size_bytes: 8,
        sensitive_bits_per_pte: m.sensitive_bits_per_sprayed_pte(),
        flips: FlipExposure::Count { expected_flips: flips },
        refresh_interval_ms: 64.0,
        rate_derating: 1.0,
    }
}

fn criterion_4() -> Check {
    let scenarios = load_scenarios(&DataSource::embedded()).unwrap();
    let mut detail = Vec::new();
    for (name, target) in [("cobalt_session", 0.01), ("rowhammer_sprayed", 0.30)] {
        let p = spray_hit_probability(&scenarios[name]);
        ensure(rel_diff(p, target) <= 0.5, || format!("{name}: P = {p}"))?;
        detail.push(format!("{name} P={p:.4}"));
    }

    let fixtures = load_fixtures(&DataSource::embedded()).unwrap();
    let trials = 10_000;
    for (fixture, flips) in [("lab_session", 1), ("heavy_spray", 1), ("lab_session", 27)] {
        let f = &fixtures[fixture];
        let m = build_fixture(f.name, f.params).unwrap();
        let p = spray_hit_probability(&scenario_for(&m, flips as f64));
        let cfg = CampaignConfig {
            flips: FlipCount::Fixed(flips),
            placement: Placement::Uniform,
            trials,
            seed: 2024,
        };
        let got = run_campaign(&m, &cfg).unwrap().fraction(Outcome::PrivilegeEscalation);
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        ensure((got - p).abs() <= 3.0 * sigma, || {
            format!("{fixture} x{flips}: campaign {got} vs analytic {p} (3σ = {})", 3.0 * sigma)
        })?;
        detail.push(format!("{fixture}x{flips} MC {got:.4} vs {p:.4}"));
    }
    Ok(detail.join(", "))
}

fn raw_entry(m: &ToyMachine, offset: u64) -> [u8; 8] {
    std::array::from_fn(|i| m.read_byte(offset + i as u64))
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for n in 0..1_000 {
        let m = build_fixture(
            FixtureName::SuidPing,
            FixtureParams {
                phys_bytes: 1 << rng.random_range(18..=22),
                spray_fraction: rng.random_range(0.0..0.95),
                layout_seed: rng.random(),
            },
        )
        .unwrap();
        let fb = m.frame_bits();
        let target = m.target();
        let code = target.range(RangeKind::Code).unwrap();
        let vpage = code.first_vpage + rng.random_range(0..code.pages);
        let entry = target.page_table[0] * PAGE + vpage * 8;
        let hit = m.inject_flip(entry, 0).unwrap();
        let walk = walk_user(|o| hit.read_byte(o), &target.page_table, vpage, fb, hit.frames());
        ensure(walk == Walk::Fault, || format!("fixture {n}: cleared present bit still walks: {walk:?}"))?;
        let got = classify_outcome(&hit);
        ensure(got == Outcome::CrashSegfault, || format!("fixture {n}: present clear gave {got}"))?;

        let attacker = m.attacker().unwrap();
        let av = rng.random_range(0..attacker.page_table.len() as u64 * 512);
        let a_entry = attacker.page_table[(av / 512) as usize] * PAGE + (av % 512) * 8;
        let before = decode_pte(raw_entry(&m, a_entry), fb);
        let onto_pt: Vec<u32> = (0..fb).filter(|&j| m.tag(before.frame ^ (1 << j)) == PageTag::PtPage).collect();
        ensure(!onto_pt.is_empty(), || format!("fixture {n}: no redirect bit"))?;
        let bit = 12 + onto_pt[rng.random_range(0..onto_pt.len())];
        let hit = m.inject_flip(a_entry + (bit / 8) as u64, (bit % 8) as u8).unwrap();
        let walk = walk_user(|o| hit.read_byte(o), &attacker.page_table, av, fb, hit.frames());
        let Walk::Mapped { frame, writable: true } = walk else {
            return Err(format!("fixture {n}: redirected entry walks to {walk:?}"));
        };
        ensure(hit.tag(frame) == PageTag::PtPage, || format!("fixture {n}: redirect lands on {:?}", hit.tag(frame)))?;
        let got = classify_outcome(&hit);
        ensure(got == Outcome::PrivilegeEscalation, || format!("fixture {n}: redirect gave {got}"))?;
    }
    Ok("1000 fixtures agree with the walker".into())
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut missed = 0;
    for case in 0..1_000 {
        let region = rng.random_range(1..5_000u64);
        let pattern = TestPattern::CANONICAL[rng.random_range(0..3)];
        let rate = rng.random_range(100.0..10_000.0);
        let mut cfg = ScanConfig::new(region, pattern, region as f64 / rate * rng.random_range(0.05..40.0));
        cfg.read_rate_bytes_per_s = rate;
        cfg.rewrite_on_detect = rng.random();
        let s = Strike {
            t: rng.random_range(0.0..cfg.total_duration_s),
            offset: rng.random_range(0..region),
            bit: rng.random_range(0..8),
        };
        let ev = FlipEvent::new(s.t, s.offset, s.bit, pattern, region).unwrap();
        let report = run_session(&cfg, &[ev]).unwrap();
        let ours = OracleVerdict {
            detected: report
                .detected
                .iter()
                .map(|d| OracleDetection { strike: 0, at: d.detected_at_s, observed: d.observed_byte })
                .collect(),
            missed: report.missed.iter().map(|_| 0).collect(),
        };
        let oracle = scan_oracle(&[s], region, rate, cfg.total_duration_s, pattern.byte(), cfg.rewrite_on_detect);
        ensure(ours == oracle, || format!("case {case}: {ours:?} vs oracle {oracle:?}"))?;
        missed += report.missed.len();
    }

    // conservation over crowded multi-flip sessions
    for case in 0..1_000 {
        let region = rng.random_range(1..2_000u64);
        let pattern = TestPattern::CANONICAL[rng.random_range(0..3)];
        let mut cfg = ScanConfig::new(region, pattern, rng.random_range(0.1..20.0));
        cfg.read_rate_bytes_per_s = rng.random_range(100.0..10_000.0);
        cfg.rewrite_on_detect = rng.random();
        let mut events: Vec<FlipEvent> = (0..rng.random_range(0..40))
            .map(|_| {
                let t = rng.random_range(0.0..cfg.total_duration_s);
                FlipEvent::new(t, rng.random_range(0..region.min(4)), rng.random_range(0..2), pattern, region).unwrap()
            })
            .collect();
        events.sort_by(|a, b| a.t_s().total_cmp(&b.t_s()));
        let r = run_session(&cfg, &events).unwrap();
        ensure(r.detected.len() + r.missed.len() == events.len(), || format!("fuzz case {case} loses events"))?;
    }
    Ok(format!("1000 single-flip sessions match ({missed} misses), 1000 fuzz sessions conserve"))
}

fn criterion_7() -> Check {
    let d = PhysicsData::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let year = 365.25 * 86_400.0;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let iso = d.isotope(if rng.random() { "Co-60" } else { "Cs-137" }).unwrap();
        let (a, b) = (rng.random_range(0.0..200.0 * year), rng.random_range(0.0..200.0 * year));
        let e = rel_diff(decay_fraction(iso, a + b), decay_fraction(iso, a) * decay_fraction(iso, b));
        worst = worst.max(e);

        let line = EmissionLine::new(Particle::Gamma, rng.random_range(0.1..=2.0), 1.0).unwrap();
        let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
        let t = |mm| d.attenuation.transmission(&line, mm).unwrap();
        worst = worst.max(rel_diff(t(x + y), t(x) * t(y)));
    }
    ensure(worst <= 1e-12, || format!("worst relative error {worst:e}"))?;

    use EnergyUnit::{KeV, MeV};
    let rows = [
        (SiIsotope::Si28, "28Al", Ejectile::Proton, 3.999f64, MeV),
        (SiIsotope::Si28, "25Mg", Ejectile::Alpha, 2.749, MeV),
        (SiIsotope::Si29, "29Al", Ejectile::Proton, 3.009, MeV),
        (SiIsotope::Si29, "26Mg", Ejectile::Alpha, 35.00, KeV),
        (SiIsotope::Si30, "30Al", Ejectile::Proton, 8.040, MeV),
        (SiIsotope::Si30, "27Mg", Ejectile::Alpha, 4.341, MeV),
    ];
    ensure(d.reactions.len() == rows.len(), || format!("{} reaction rows", d.reactions.len()))?;
    for (target, product, ejected, value, unit) in rows {
        let [p, a] = d.lookup_si_reaction(&format!("{target:?}"), Particle::Neutron).unwrap();
        let r = if ejected == Ejectile::Proton { p } else { a };
        let back: fallout_core::physics::SiReaction = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        ensure(
            back == r
                && r.product == product
                && r.energy.unit == unit
                && back.energy.value.to_bits() == value.to_bits(),
            || format!("row {r} does not round-trip"),
        )?;
    }
    Ok(format!("worst relative error {worst:.1e}, 6 reaction rows exact"))
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 5] = [
        &["simulate", "--config", "configs/cobalt_t41p.toml"],
        &["scan", "--config", "configs/scan_replay.toml"],
        &["estimate"],
        &["campaign", "--config", "configs/campaign_calibrated.toml"],
        &["report", "fixtures/cobalt_ff.jsonl", "fixtures/cesium_ff.jsonl"],
    ];
    for args in runs {
        let mut files = Vec::new();
        for round in 0..2 {
            let out = dir.path().join(format!("{}_{round}.jsonl", args[0]));
            let mut full: Vec<&str> = args.to_vec();
            let o = out.display().to_string();
            full.extend(["--out", &o]);
            let run = fallout(&full);
            ensure(run.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&run.stderr)))?;
            files.push(std::fs::read(&out).unwrap());
        }
        ensure(files[0] == files[1], || format!("{} output differs between runs", args[0]))?;
    }

    // replaying a manifest reproduces the simulation byte for byte
    let first = dir.path().join("simulate_0.jsonl");
    let manifest = dir.path().join("simulate_0.jsonl.manifest.json");
    let again = dir.path().join("replayed.jsonl");
    let run = fallout(&["replay", &manifest.display().to_string(), "--out", &again.display().to_string()]);
    ensure(run.status.success(), || String::from_utf8_lossy(&run.stderr).into_owned())?;
    ensure(std::fs::read(first).unwrap() == std::fs::read(again).unwrap(), || "replay differs".into())?;
    Ok("5 seeded commands and a manifest replay are byte-identical".into())
}

struct Criterion {
    n: u8,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() -> std::process::ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let all = [
        Criterion { n: 1, limit: secs(60), run: criterion_1 },
        Criterion { n: 2, limit: None, run: criterion_2 },
        Criterion { n: 3, limit: secs(10), run: criterion_3 },
        Criterion { n: 4, limit: secs(120), run: criterion_4 },
        Criterion { n: 5, limit: secs(60), run: criterion_5 },
        Criterion { n: 6, limit: None, run: criterion_6 },
        Criterion { n: 7, limit: None, run: criterion_7 },
        Criterion { n: 8, limit: None, run: criterion_8 },
    ];
    let mut failed = Vec::new();
    for c in all {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if took > limit => Err(format!("took {took:.1?}, limit {limit:?}")),
            (r, _) => r,
        };
        match &result {
            Ok(detail) => println!("criterion {}: PASS ({detail}; {:.2} s)", c.n, took.as_secs_f64()),
            Err(why) => {
                println!("criterion {}: FAIL ({why}; {:.2} s)", c.n, took.as_secs_f64());
                failed.push(c.n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
        std::process::ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::ExitCode::FAILURE
    }
}

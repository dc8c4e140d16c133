use serde::Serialize;

use fallout_core::exploitlab::{
    build_fixture, load_fixtures, run_campaign, run_campaign_with_trials, CampaignConfig,
    CampaignSummary, FixtureName, FixtureParams, FlipCount,
};

use super::{table, Ctx, RunResult, Sink};
use crate::config::{CampaignFile, CampaignSection, ConfigSource, FixtureOverrides, FlipsSection};
use crate::error::{CliError, Status};
use crate::manifest::Invocation;

const DEFAULT_TRIALS: u64 = 10_000;

#[derive(Serialize)]
struct SummaryRecord<'a> {
    record: &'static str,
    fixture: &'a str,
    #[serde(flatten)]
    summary: CampaignSummary,
}

#[derive(Serialize)]
struct TrialLine<'a, T> {
    record: &'static str,
    #[serde(flatten)]
    trial: &'a T,
}

pub fn run(ctx: &Ctx, inv: &Invocation) -> Result<RunResult, CliError> {
    let src = inv
        .config
        .as_ref()
        .ok_or_else(|| CliError::usage("campaign needs --config"))?;
    let file: CampaignFile = src.parse()?;
    let CampaignSection {
        fixture,
        trials,
        seed,
        per_trial,
    } = &file.campaign;

    let (kind, params) = resolve_fixture(ctx, src, fixture, &file.fixture)?;
    let machine = build_fixture(kind, params).map_err(|e| src.error_at("fixture", e))?;
    let cfg = CampaignConfig {
        flips: flip_count(ctx, src, &file.flips)?,
        placement: file.flips.placement,
        trials: inv.overrides.trials.or(*trials).unwrap_or(DEFAULT_TRIALS),
        seed: inv.overrides.seed.or(*seed).unwrap_or(0),
    };

    let mut sink = Sink::open(inv.out.as_deref())?;
    let summary = if *per_trial {
        let (summary, records) =
            run_campaign_with_trials(&machine, &cfg).map_err(CliError::usage)?;
        for r in &records {
            sink.record(&TrialLine { record: "trial", trial: r })?;
        }
        summary
    } else {
        run_campaign(&machine, &cfg).map_err(CliError::usage)?
    };
    sink.record(&SummaryRecord {
        record: "summary",
        fixture,
        summary,
    })?;

    let pct = |n: u64| format!("{:.2}%", 100.0 * n as f64 / summary.trials as f64);
    let rows = vec![
        vec!["Outcome".to_string(), "Trials".into(), "Share".into()],
        vec!["no_effect".into(), summary.no_effect.to_string(), pct(summary.no_effect)],
        vec!["silent_corruption".into(), summary.silent.to_string(), pct(summary.silent)],
        vec!["crash_segfault".into(), summary.crash.to_string(), pct(summary.crash)],
        vec!["privilege_escalation".into(), summary.escalation.to_string(), pct(summary.escalation)],
    ];
    sink.say(format!(
        "{fixture}: {} trials, seed {}\n{}",
        summary.trials,
        cfg.seed,
        table(&rows).trim_end()
    ));
    Ok(RunResult {
        status: Status::Clean,
        seed: Some(cfg.seed),
        outputs: sink.finish()?,
    })
}

fn resolve_fixture(
    ctx: &Ctx,
    src: &ConfigSource,
    name: &str,
    overrides: &FixtureOverrides,
) -> Result<(FixtureName, FixtureParams), CliError> {
    let named = load_fixtures(&ctx.data).map_err(CliError::usage)?;
    let (kind, params) = match named.get(name) {
        Some(f) => (f.name, f.params),
        None => {
            let kind: FixtureName = name.parse().map_err(|_| {
                let known: Vec<&str> = named.keys().map(String::as_str).collect();
                src.error_at(
                    "fixture",
                    format!(
                        "unknown fixture `{name}` (known: {}, suid_ping, bare_metal_firmware)",
                        known.join(", ")
                    ),
                )
            })?;
            (kind, FixtureParams::default())
        }
    };
    Ok((kind, overrides.apply(params)))
}

fn flip_count(ctx: &Ctx, src: &ConfigSource, f: &FlipsSection) -> Result<FlipCount, CliError> {
    let given = [f.count.is_some(), f.poisson_mean.is_some(), f.calibrated.is_some()];
    if given.iter().filter(|g| **g).count() > 1 {
        return Err(src.error_at(
            "count",
            "give at most one of count, poisson_mean and calibrated",
        ));
    }
    if let Some(n) = f.count {
        return Ok(FlipCount::Fixed(n));
    }
    if let Some(mean) = f.poisson_mean {
        return Ok(FlipCount::Poisson(mean));
    }
    let Some(c) = &f.calibrated else {
        return Ok(FlipCount::Fixed(1));
    };
    let model = ctx.calibrated_model()?;
    let iso = ctx
        .physics
        .isotope(&c.isotope)
        .map_err(|e| src.error_at("isotope", e))?;
    let rate = model
        .rate_for(iso)
        .ok_or_else(|| src.error_at("isotope", format!("no calibration for {}", iso.name)))?;
    if !(c.duration_s >= 0.0 && c.region_gib >= 0.0) {
        return Err(src.error_at("duration_s", "duration and region must be non-negative"));
    }
    let mean = rate.base_rate_per_s_per_gib * rate.factor(c.pattern) * c.duration_s * c.region_gib;
    Ok(FlipCount::Poisson(mean))
}

use fallout_core::fluxsim::{
    rate_breakdown, simulate_exposure, simulate_with_count, write_event_log, ExposurePlan,
    LogHeader, Source,
};
use fallout_core::physics::{Coverage, ShieldSpec};

use super::{Ctx, RunResult, Sink};
use crate::config::SimulateConfig;
use crate::error::{CliError, Status};
use crate::manifest::Invocation;

pub fn run(ctx: &Ctx, inv: &Invocation) -> Result<RunResult, CliError> {
    let src = inv
        .config
        .as_ref()
        .ok_or_else(|| CliError::usage("simulate needs --config"))?;
    let cfg: SimulateConfig = src.parse()?;

    let preset = inv.overrides.preset.as_deref().unwrap_or(&cfg.device.preset);
    let mut device = ctx
        .devices
        .get(preset)
        .map_err(|e| src.error_at("preset", e))?
        .clone();
    if let Some(bytes) = cfg.device.test_region_bytes {
        device = device
            .with_test_region(bytes)
            .map_err(|e| src.error_at("test_region_bytes", e))?;
    }

    let mut model = ctx.calibrated_model()?;
    if let Some(per_day) = cfg.source.ambient_per_day_per_gib {
        if !(per_day >= 0.0 && per_day.is_finite()) {
            return Err(src.error_at("ambient_per_day_per_gib", "must be a non-negative number"));
        }
        model = model.with_ambient_per_day(per_day);
    }

    let seed = inv.overrides.seed.or(cfg.exposure.seed).unwrap_or(0);
    let ex = &cfg.exposure;
    let mut plan = match &cfg.source.isotope {
        Some(name) => {
            let iso = ctx
                .physics
                .isotope(name)
                .map_err(|e| src.error_at("isotope", e))?;
            ExposurePlan::new(iso.clone(), device, ex.pattern, ex.duration_s, seed)
        }
        None => ExposurePlan::ambient(device, ex.pattern, ex.duration_s, seed),
    };
    plan.distance_cm = ex.distance_cm;
    let covered = match (cfg.shield.start, cfg.shield.end) {
        (None, None) => Coverage::WholeDevice,
        (s, e) => Coverage::Range {
            start: s.unwrap_or(0),
            end: e.unwrap_or(u64::MAX),
        },
    };
    plan = plan.with_shield(
        ShieldSpec::new(cfg.shield.lead_mm, covered).map_err(|e| src.error_at("lead_mm", e))?,
    );

    let att = &ctx.physics.attenuation;
    let rates =
        rate_breakdown(&plan, &model, att).map_err(|e| CliError::at_line(&src.name, None, e))?;
    let events = match ex.flip_count {
        Some(n) => simulate_with_count(&plan, &model, att, n)
            .map_err(|e| src.error_at("flip_count", e))?,
        None => simulate_exposure(&plan, &model, att).map_err(CliError::usage)?,
    };

    let below = rates.below_threshold;
    let rate = rates.total_rate_per_s();
    let duration = plan.duration_s;
    let is_ambient = matches!(plan.source, Source::Ambient);
    let header = LogHeader::new(plan, model, &rates, ex.flip_count);

    let mut sink = Sink::open(inv.out.as_deref())?;
    write_event_log(sink.writer(), &header, &events)
        .map_err(|e| CliError::env(format!("cannot write event log: {e}")))?;

    if below {
        sink.say("0 flips (below susceptibility threshold)");
    } else if rate == 0.0 {
        let why = if is_ambient { "zero ambient rate" } else { "zero calibrated rate" };
        sink.say(format!("0 flips ({why})"));
    } else {
        sink.say(format!(
            "{} flips in {duration} s (expected {:.2}, one every {:.1} s)",
            events.len(),
            header.expected_count,
            1.0 / rate
        ));
    }
    Ok(RunResult {
        status: Status::Clean,
        seed: Some(seed),
        outputs: sink.finish()?,
    })
}

use serde::Serialize;

use fallout_core::exploitlab::{load_scenarios, spray_hit_probability, SprayScenario};

use super::{table, Ctx, RunResult, Sink};
use crate::config::{EstimateFile, ScenarioRef};
use crate::error::{CliError, Status};
use crate::manifest::Invocation;

#[derive(Serialize)]
struct EstimateRecord<'a> {
    record: &'static str,
    scenario: &'a str,
    p_hit: f64,
    expected_flips: f64,
    /// Absent when the scenario gives a flip count rather than a rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    seconds_per_flip: Option<f64>,
    sensitive_fraction: f64,
    refresh_interval_ms: f64,
}

pub fn run(ctx: &Ctx, inv: &Invocation) -> Result<RunResult, CliError> {
    let mut scenarios: Vec<(String, SprayScenario)> = match &inv.config {
        None => load_scenarios(&ctx.data)
            .map_err(CliError::usage)?
            .into_iter()
            .collect(),
        Some(src) => {
            let file: EstimateFile = src.parse()?;
            match file.scenario {
                ScenarioRef::Named(name) => {
                    let all = load_scenarios(&ctx.data).map_err(CliError::usage)?;
                    let s = all.get(&name).cloned().ok_or_else(|| {
                        let known: Vec<&str> = all.keys().map(String::as_str).collect();
                        src.error_at(
                            "scenario",
                            format!("unknown scenario `{name}` (known: {})", known.join(", ")),
                        )
                    })?;
                    vec![(name, s)]
                }
                ScenarioRef::Inline(s) => {
                    s.validate()
                        .map_err(|e| CliError::at_line(&src.name, None, e))?;
                    vec![("inline".to_string(), *s)]
                }
            }
        }
    };

    if let Some(preset) = &inv.overrides.preset {
        let device = ctx.devices.get(preset).map_err(CliError::usage)?;
        for (_, s) in &mut scenarios {
            s.refresh_interval_ms = device.refresh_interval_ms;
        }
    }

    let mut sink = Sink::open(inv.out.as_deref())?;
    let mut rows = vec![vec![
        "Scenario".to_string(),
        "P(hit)".into(),
        "Flips".into(),
        "s/flip".into(),
        "Refresh".into(),
    ]];
    for (name, s) in &scenarios {
        let rec = EstimateRecord {
            record: "estimate",
            scenario: name,
            p_hit: spray_hit_probability(s),
            expected_flips: s.expected_flips(),
            seconds_per_flip: s.seconds_per_flip(),
            sensitive_fraction: s.sensitive_fraction(),
            refresh_interval_ms: s.refresh_interval_ms,
        };
        rows.push(vec![
            name.clone(),
            format!("{:.4}", rec.p_hit),
            format!("{:.2}", rec.expected_flips),
            rec.seconds_per_flip.map_or("-".into(), |v| format!("{v:.1}")),
            format!("{} ms", rec.refresh_interval_ms),
        ]);
        sink.record(&rec)?;
    }
    sink.say(table(&rows).trim_end());
    Ok(RunResult {
        status: Status::Clean,
        seed: None,
        outputs: sink.finish()?,
    })
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;

use serde::Serialize;

use fallout_core::fluxsim::{read_event_log, LogError, Source};
use fallout_core::memmodel::{TestPattern, GIB};

use super::{table, Ctx, RunResult, Sink};
use crate::error::{CliError, Status};
use crate::manifest::Invocation;

#[derive(Default)]
struct Group {
    devices: BTreeSet<String>,
    regions: BTreeSet<u64>,
    time_s: f64,
    flips: u64,
    runs: u64,
}

#[derive(Serialize)]
struct RowRecord<'a> {
    record: &'static str,
    element: &'a str,
    device: String,
    used_memory_bytes: Vec<u64>,
    pattern: TestPattern,
    time_s: f64,
    flips: u64,
    runs: u64,
}

#[derive(Serialize)]
struct TotalRecord<'a> {
    record: &'static str,
    element: &'a str,
    flips: u64,
}

pub fn run(_ctx: &Ctx, inv: &Invocation) -> Result<RunResult, CliError> {
    let mut groups: BTreeMap<(String, TestPattern), Group> = BTreeMap::new();
    for path in &inv.inputs {
        let f = File::open(path)
            .map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
        let (header, events) = read_event_log(BufReader::new(f)).map_err(|e| match e {
            LogError::Corrupt { line, message } => {
                CliError::usage(format!("{}:{line}: {message}", path.display()))
            }
            other => CliError::usage(format!("{}: {other}", path.display())),
        })?;
        let plan = header.plan;
        let element = match &plan.source {
            Source::Isotope(iso) => iso.name.clone(),
            Source::Ambient => "ambient".to_string(),
        };
        let g = groups.entry((element, plan.pattern)).or_default();
        g.devices.insert(plan.device.label.clone());
        g.regions.insert(plan.device.test_region_bytes);
        g.time_s += plan.duration_s;
        g.flips += events.len() as u64;
        g.runs += 1;
    }

    // rows only go out as JSON Lines when asked for; stdout carries the table
    let mut sink = inv.out.as_deref().map(|p| Sink::open(Some(p))).transpose()?;
    let mut rows = vec![["Element", "Device", "Used Memory", "Pattern", "Time", "Flips"]
        .map(String::from)
        .to_vec()];
    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for ((element, pattern), g) in &groups {
        let device = g.devices.iter().cloned().collect::<Vec<_>>().join(", ");
        let memory = g.regions.iter().map(|&b| bytes_label(b)).collect::<Vec<_>>().join(", ");
        rows.push(vec![
            element.clone(),
            device.clone(),
            memory,
            pattern.to_string(),
            format!("{} s", g.time_s),
            g.flips.to_string(),
        ]);
        *totals.entry(element).or_default() += g.flips;
        let Some(sink) = sink.as_mut() else { continue };
        sink.record(&RowRecord {
            record: "row",
            element,
            device,
            used_memory_bytes: g.regions.iter().copied().collect(),
            pattern: *pattern,
            time_s: g.time_s,
            flips: g.flips,
            runs: g.runs,
        })?;
    }
    for (element, flips) in &totals {
        let Some(sink) = sink.as_mut() else { break };
        sink.record(&TotalRecord {
            record: "total",
            element,
            flips: *flips,
        })?;
    }

    let mut text = table(&rows);
    for (element, flips) in &totals {
        text.push_str(&format!("total {element}: {flips} flips\n"));
    }
    print!("{text}");
    Ok(RunResult {
        status: Status::Clean,
        seed: None,
        outputs: match sink {
            Some(s) => s.finish()?,
            None => Vec::new(),
        },
    })
}

fn bytes_label(b: u64) -> String {
    const MIB: u64 = 1 << 20;
    if b.is_multiple_of(GIB) {
        format!("{} GiB", b / GIB)
    } else if b.is_multiple_of(MIB) {
        format!("{} MiB", b / MIB)
    } else {
        format!("{b} B")
    }
}

use std::fs::File;
use std::io::BufReader;
use std::time::Duration;

use serde::Serialize;

use fallout_core::fluxsim::{read_event_log, LogError};
use fallout_core::memmodel::{FlipEvent, RealBuffer};
use fallout_core::scanner::{
    live_scan, run_session, Detection, ScanConfig, ScanReport, SelfTest,
    DEFAULT_READ_RATE_BYTES_PER_S,
};

use super::{Ctx, RunResult, Sink};
use crate::config::{ConfigSource, LockPolicy, ScanFile, ScanMode};
use crate::error::{CliError, Status};
use crate::manifest::Invocation;

#[derive(Serialize)]
struct Tagged<'a, T> {
    record: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

const DEFAULT_LIVE_DURATION_S: f64 = 60.0;

pub fn run(_ctx: &Ctx, inv: &Invocation) -> Result<RunResult, CliError> {
    let src = inv
        .config
        .as_ref()
        .ok_or_else(|| CliError::usage("scan needs --config"))?;
    let file: ScanFile = src.parse()?;
    let mode = inv
        .overrides
        .mode
        .or(file.mode)
        .unwrap_or(if file.live.is_some() { ScanMode::Live } else { ScanMode::Replay });
    let rate = file
        .scan
        .read_rate_bytes_per_s
        .unwrap_or(DEFAULT_READ_RATE_BYTES_PER_S);

    let (report, status) = match mode {
        ScanMode::Replay => (replay(src, &file, rate)?, Status::Clean),
        ScanMode::Live => {
            let r = live(src, &file, rate, inv.overrides.self_test)?;
            let status = if r.detected.is_empty() { Status::Clean } else { Status::Detections };
            (r, status)
        }
    };

    let mut sink = Sink::open(inv.out.as_deref())?;
    for d in &report.detected {
        sink.record(&Tagged::<Detection> { record: "detected", body: d })?;
    }
    for m in &report.missed {
        sink.record(&Tagged::<FlipEvent> { record: "missed", body: m })?;
    }
    let summary = report.summary();
    sink.record(&summary)?;
    sink.say(format!(
        "{} detected, {} missed, {} passes of {:.3} s",
        summary.detected, summary.missed, summary.passes_completed, summary.pass_duration_s
    ));
    Ok(RunResult {
        status,
        seed: None,
        outputs: sink.finish()?,
    })
}

fn replay(src: &ConfigSource, file: &ScanFile, rate: f64) -> Result<ScanReport, CliError> {
    let section = file
        .replay
        .as_ref()
        .ok_or_else(|| CliError::at_line(&src.name, None, "replay mode needs a [replay] log"))?;
    let path = src.resolve(&section.log);
    let f = File::open(&path)
        .map_err(|e| src.error_at("log", format!("cannot open {}: {e}", path.display())))?;
    let (header, events) = read_event_log(BufReader::new(f)).map_err(|e| match e {
        LogError::Corrupt { line, message } => {
            CliError::usage(format!("{}:{line}: {message}", path.display()))
        }
        other => CliError::usage(format!("{}: {other}", path.display())),
    })?;
    let mut cfg = ScanConfig::new(
        header.plan.device.test_region_bytes,
        header.plan.pattern,
        file.scan.duration_s.unwrap_or(header.plan.duration_s),
    );
    cfg.read_rate_bytes_per_s = rate;
    cfg.rewrite_on_detect = file.scan.rewrite_on_detect;
    run_session(&cfg, &events).map_err(|e| CliError::at_line(&src.name, None, e))
}

fn live(
    src: &ConfigSource,
    file: &ScanFile,
    rate: f64,
    force_self_test: bool,
) -> Result<ScanReport, CliError> {
    let section = file
        .live
        .as_ref()
        .ok_or_else(|| CliError::at_line(&src.name, None, "live mode needs a [live] section"))?;
    let len = usize::try_from(section.region_bytes)
        .map_err(|_| src.error_at("region_bytes", "region does not fit in the address space"))?;
    let mut cfg = ScanConfig::new(
        section.region_bytes,
        section.pattern,
        file.scan.duration_s.unwrap_or(DEFAULT_LIVE_DURATION_S),
    );
    cfg.read_rate_bytes_per_s = rate;
    cfg.rewrite_on_detect = file.scan.rewrite_on_detect;
    cfg.validate()
        .map_err(|e| CliError::at_line(&src.name, None, e))?;

    let self_test = (force_self_test || section.self_test_offset.is_some()).then(|| SelfTest {
        byte_offset: section.self_test_offset.map_or(len / 2, |o| o as usize),
        bit: section.self_test_bit,
        delay: Duration::from_millis(section.self_test_delay_ms),
    });

    let mut buf = RealBuffer::allocate(len).map_err(|e| {
        CliError::env(format!("{e}; try a smaller region_bytes or free some memory"))
    })?;
    match section.lock {
        LockPolicy::Off => {}
        LockPolicy::Try => {
            if let Err(e) = buf.lock() {
                eprintln!("warning: scanning unlocked memory: {e}");
            }
        }
        LockPolicy::Require => buf.lock().map_err(CliError::env)?,
    }
    live_scan(&buf, &cfg, self_test).map_err(|e| CliError::at_line(&src.name, None, e))
}

mod campaign;
mod estimate;
mod report;
mod scan;
mod simulate;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use fallout_core::datafiles::DataSource;
use fallout_core::fluxsim::{calibrate, load_observations, FlipRateModel};
use fallout_core::memmodel::DeviceCatalog;
use fallout_core::physics::PhysicsData;

use crate::error::{CliError, Status};
use crate::manifest::{self, Invocation, RunManifest, Subcommand};

/// Data tables every command may need, loaded once.
pub struct Ctx {
    pub data: DataSource,
    pub physics: PhysicsData,
    pub devices: DeviceCatalog,
}

impl Ctx {
    pub fn new(data_dir: Option<&Path>) -> Result<Self, CliError> {
        let data = data_dir.map_or_else(DataSource::embedded, DataSource::with_dir);
        Ok(Self {
            physics: PhysicsData::load(&data).map_err(CliError::usage)?,
            devices: DeviceCatalog::load(&data).map_err(CliError::usage)?,
            data,
        })
    }

    pub fn calibrated_model(&self) -> Result<FlipRateModel, CliError> {
        let obs = load_observations(&self.data).map_err(CliError::usage)?;
        Ok(calibrate(&obs).map_err(CliError::usage)?.model)
    }
}

pub struct RunResult {
    pub status: Status,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

/// JSON Lines destination: the `--out` file, or stdout.
pub struct Sink {
    out: Box<dyn Write>,
    path: Option<PathBuf>,
}

impl Sink {
    pub fn open(path: Option<&Path>) -> Result<Self, CliError> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).map_err(|e| CliError::write_failed(p, e))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        };
        Ok(Self {
            out,
            path: path.map(Path::to_path_buf),
        })
    }

    pub fn record<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| self.fail(e.into()))?;
        self.out.write_all(b"\n").map_err(|e| self.fail(e))
    }

    pub fn writer(&mut self) -> &mut dyn Write {
        &mut self.out
    }

    fn fail(&self, e: io::Error) -> CliError {
        match &self.path {
            Some(p) => CliError::write_failed(p, e),
            None => CliError::env(format!("cannot write to stdout: {e}")),
        }
    }

    pub fn finish(mut self) -> Result<Vec<PathBuf>, CliError> {
        self.out.flush().map_err(|e| self.fail(e))?;
        Ok(self.path.into_iter().collect())
    }

    /// Human-readable lines go to stdout unless stdout carries the data.
    pub fn say(&self, line: impl AsRef<str>) {
        if self.path.is_some() {
            println!("{}", line.as_ref());
        } else {
            eprintln!("{}", line.as_ref());
        }
    }
}

pub fn execute(inv: &Invocation) -> Result<RunResult, CliError> {
    let ctx = Ctx::new(inv.data_dir.as_deref())?;
    match inv.subcommand {
        Subcommand::Simulate => simulate::run(&ctx, inv),
        Subcommand::Scan => scan::run(&ctx, inv),
        Subcommand::Estimate => estimate::run(&ctx, inv),
        Subcommand::Campaign => campaign::run(&ctx, inv),
        Subcommand::Report => report::run(&ctx, inv),
    }
}

/// Runs the invocation and writes its manifest.
pub fn run_and_record(inv: Invocation, replay_of: Option<PathBuf>) -> Result<Status, CliError> {
    let started = manifest::now_ms();
    let result = execute(&inv)?;
    let mut m = RunManifest::new(inv, result.seed, started, result.outputs);
    m.replay_of = replay_of;
    manifest::write(&m)?;
    Ok(result.status)
}

pub fn replay(path: &Path, out: Option<PathBuf>) -> Result<Status, CliError> {
    let m = RunManifest::read(path)?;
    if m.tool_version != fallout_core::VERSION {
        eprintln!(
            "warning: manifest written by version {}, replaying with {}",
            m.tool_version,
            fallout_core::VERSION
        );
    }
    let mut inv = m.invocation;
    if out.is_some() {
        inv.out = out;
    }
    run_and_record(inv, Some(path.to_path_buf()))
}

/// Fixed-width text table; the first row is the header.
pub fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};

use config::{ConfigSource, ScanMode};
use error::{CliError, Status};
use manifest::{Invocation, Overrides, Subcommand};

#[derive(Parser)]
#[command(name = "fallout", version, about = "Radiation-induced DRAM bit flips: simulate, scan, estimate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Out {
    /// Write records here (JSON Lines); the manifest goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Simulate an exposure and write its flip event log.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Device preset, overriding the config.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        out: Out,
    },
    /// Scan a simulated log or a real buffer for flips.
    Scan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ScanMode>,
        /// Plant one flip during a live scan to check the scanner.
        #[arg(long)]
        self_test: bool,
        #[command(flatten)]
        out: Out,
    },
    /// Analytic probability that a spray attack gets a useful flip.
    Estimate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Take the refresh interval from this device preset.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        out: Out,
    },
    /// Inject flips into a toy machine and classify the outcomes.
    Campaign {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fixture to use when there is no config.
        #[arg(long, conflicts_with = "config")]
        fixture: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Tabulate flip counts from event logs.
    Report {
        logs: Vec<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Re-run the invocation recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[command(flatten)]
        out: Out,
    },
}

fn invocation(sub: Subcommand, config: Option<PathBuf>, overrides: Overrides, out: Out) -> Result<Invocation, CliError> {
    Ok(Invocation {
        subcommand: sub,
        config: config.as_deref().map(ConfigSource::read).transpose()?,
        overrides,
        out: out.out,
        inputs: Vec::new(),
        data_dir: std::env::var_os("FALLOUT_DATA_DIR").map(PathBuf::from),
    })
}

fn run(cli: Cli) -> Result<Status, CliError> {
    let inv = match cli.command {
        Command::Replay { manifest, out } => return commands::replay(&manifest, out.out),
        Command::Simulate { config, seed, preset, out } => invocation(
            Subcommand::Simulate,
            Some(config),
            Overrides { seed, preset, ..Overrides::default() },
            out,
        )?,
        Command::Scan { config, mode, self_test, out } => invocation(
            Subcommand::Scan,
            Some(config),
            Overrides { mode, self_test, ..Overrides::default() },
            out,
        )?,
        Command::Estimate { config, preset, out } => invocation(
            Subcommand::Estimate,
            config,
            Overrides { preset, ..Overrides::default() },
            out,
        )?,
        Command::Campaign { config, fixture, seed, trials, out } => {
            let mut inv = invocation(
                Subcommand::Campaign,
                config,
                Overrides { seed, trials, ..Overrides::default() },
                out,
            )?;
            if let Some(name) = fixture {
                inv.config = Some(ConfigSource::inline(format!("[campaign]\nfixture = {name:?}\n")));
            }
            inv
        }
        Command::Report { logs, out } => {
            let mut inv = invocation(Subcommand::Report, None, Overrides::default(), out)?;
            inv.inputs = logs;
            inv
        }
    };
    commands::run_and_record(inv, None)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(status) => status.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

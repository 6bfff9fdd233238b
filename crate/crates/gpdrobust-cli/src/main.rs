//! `gpdrobust` — robust tail fitting, operational value-at-risk, and
//! diagnostics for threshold exceedances, from loss records in CSV form.
//!
//! Five commands share one configuration surface (flags, or a TOML file
//! that flags override):
//!
//! * `fit`        — estimate tail parameters; default pipeline is a
//!                  median/kMad start plus a radius-minimax one-step.
//! * `opvar`      — fit, then the single-loss value-at-risk at `--alpha`.
//! * `diagnose`   — influence table, outlier flags, and a QQ band.
//! * `study`      — Monte-Carlo bias/MSE comparison around the fitted
//!                  tail under configurable contamination.
//! * `build-grid` — precompute a multiplier grid for fast robust fits.
//!
//! Exit codes are a stable contract: 0 success (warnings allowed), 1
//! usage or configuration error, 2 data error, 3 numerical failure.
//! Every failure also writes a one-line JSON record to stderr so callers
//! can parse the reason without scraping prose.

mod commands;
mod config;
mod ingest;

use clap::error::ErrorKind;
use clap::Parser;
use serde::Serialize;

use commands::Ctx;
use config::{RawConfig, RunConfig};

/// A failed run, ordered by where the fault lies: the invocation, the
/// data, or the numerics.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Data(_) => "data",
            Failure::Numeric(_) => "numerical",
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error_kind: &'a str,
    message: &'a str,
    exit_code: i32,
}

/// One machine-readable line on stderr per failure.
fn emit_failure(f: &Failure) {
    let record = ErrorRecord {
        error_kind: f.kind(),
        message: &f.to_string(),
        exit_code: f.exit_code(),
    };
    match serde_json::to_string(&record) {
        Ok(line) => eprintln!("{line}"),
        Err(_) => eprintln!("{{\"error_kind\":\"{}\"}}", f.kind()),
    }
}

#[derive(Parser)]
#[command(
    name = "gpdrobust",
    version,
    about = "Robust heavy-tail fitting and operational value-at-risk from CSV loss records"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Fit tail parameters to threshold exceedances.
    Fit(CommonArgs),
    /// Fit, then compute the value-at-risk quantile.
    Opvar(CommonArgs),
    /// Emit influence, outlier, and QQ-band tables for a fit.
    Diagnose(CommonArgs),
    /// Monte-Carlo bias/MSE study around the fitted tail.
    Study(CommonArgs),
    /// Precompute a multiplier grid and write it to --grid-file.
    BuildGrid(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// TOML file of settings; command-line flags take precedence.
    #[arg(long)]
    config: Option<std::path::PathBuf>,

    #[command(flatten)]
    raw: RawConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Opvar(_) => "opvar",
            Command::Diagnose(_) => "diagnose",
            Command::Study(_) => "study",
            Command::BuildGrid(_) => "build-grid",
        }
    }

    fn into_parts(self) -> (&'static str, CommonArgs) {
        let name = self.name();
        let args = match self {
            Command::Fit(a)
            | Command::Opvar(a)
            | Command::Diagnose(a)
            | Command::Study(a)
            | Command::BuildGrid(a) => a,
        };
        (name, args)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (name, args) = cli.command.into_parts();
    let cfg: RunConfig = config::resolve(name, args.raw, args.config.as_deref())?;
    let ctx = Ctx::new(cfg)?;
    match name {
        "fit" => commands::cmd_fit(&ctx),
        "opvar" => commands::cmd_opvar(&ctx),
        "diagnose" => commands::cmd_diagnose(&ctx),
        "study" => commands::cmd_study(&ctx),
        "build-grid" => commands::cmd_build_grid(&ctx),
        _ => unreachable!("every subcommand is dispatched"),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            // clap would exit with its own code 2; remap to the documented
            // usage code 1, keeping its rendered message.
            eprint!("{e}");
            let first = e
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid invocation")
                .to_string();
            let f = Failure::Usage(first);
            emit_failure(&f);
            std::process::exit(f.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(f) => {
            emit_failure(&f);
            std::process::exit(f.exit_code());
        }
    }
}

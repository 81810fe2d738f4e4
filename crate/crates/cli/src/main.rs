// negated comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{load_document, parse_override};
use crate::error::CliError;

/// Federated local AMSGrad simulator.
///
/// Exit codes: 0 success, 1 audit failure, 2 usage or config error,
/// 3 numeric failure during a run.
#[derive(Debug, Parser)]
#[command(name = "fedlalr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every seed of a config and write one CSV per seed.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set run.rounds=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a config once per value of one key, plus a median summary.
    Sweep {
        config: PathBuf,
        /// Key and values, e.g. `--vary N=2,8,32`.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        vary: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Record a short run and audit its invariants.
    Check {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
}

fn load(path: &Path, set: &[String]) -> Result<toml::Table, CliError> {
    let overrides = set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    load_document(path, &overrides)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, set } => commands::run(load(&config, &set)?, &config, &stem(&config)),
        Command::Sweep { config, vary, set } => {
            commands::sweep(load(&config, &set)?, &config, &stem(&config), &vary)
        }
        Command::Check { config, set } => commands::check(load(&config, &set)?, &config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedlalr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

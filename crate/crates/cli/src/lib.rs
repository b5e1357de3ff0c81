//! Command-line front end: run experiments, compare reports, replay traces.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

pub use commands::{cmd_compare, cmd_report, cmd_run, compare, CliError, Comparison, RunArgs};
pub use config::{ConfigError, RunConfig};

pub const OUT_ENV: &str = "ADAPTFLOW_OUT";

#[derive(Debug, Parser)]
#[command(name = "adaptflow", version, about = "Adaptive protein-design pipeline runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute the pipelines described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Root seed; overrides the config value.
        #[arg(long)]
        seed: Option<u64>,
        /// Run this many consecutive seeds, each into its own subdirectory.
        #[arg(long, default_value_t = 1)]
        seeds: u32,
        /// Override a config value, e.g. `pipelines.0.cycles=6`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Compare two reports, or two directories of reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Rebuild a report from a run directory's trace and channel logs.
    Report {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(anyhow::Error::from)?;
    println!("{text}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            seeds,
            overrides,
            out,
            json,
        } => {
            let reports = cmd_run(&RunArgs {
                config,
                seed,
                seeds,
                overrides,
                out,
            })?;
            for (dir, report) in &reports {
                if json {
                    print_json(report)?;
                } else {
                    println!("== {}", dir.display());
                    print!("{}", commands::render_report(report));
                }
            }
        }
        Command::Compare { a, b, json } => {
            let c = cmd_compare(&a, &b)?;
            if json {
                print_json(&c)?;
            } else {
                print!("{}", commands::render_comparison(&c));
            }
        }
        Command::Report { dir, json } => {
            let r = cmd_report(&dir)?;
            if json {
                print_json(&r)?;
            } else {
                print!("{}", commands::render_report(&r));
            }
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `genlogit`: simulate, estimate and diagnose fixed-effects panels with
//! generalized logistic shocks.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use config::{load_config, Subcommand};
use run::{run, RunContext};

#[derive(Parser)]
#[command(name = "genlogit", version, about)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "genlogit-out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main_inner(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
    }
    let config = load_config(&cli.config)?;
    let seed = cli.seed.unwrap_or(config.seed);
    let ctx = RunContext { config, seed, out: cli.out };
    let outcome = run(cli.command, &ctx)?;
    for f in &outcome.files {
        println!("{}", f.display());
    }
    if outcome.ambiguous {
        eprintln!("warning: {}", genlogit::gmm::AMBIGUOUS);
    }
    Ok(outcome.ambiguous)
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

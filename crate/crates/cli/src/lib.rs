//! Command-line front end: simulate, filter, smooth and compare runs driven by
//! a TOML configuration, with CSV input and output.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "robust-filter", version, about = "Dead-zone and Huber state estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides `simulate.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a trajectory: measurements.csv and truth.csv.
    Simulate(CommonArgs),
    /// Run the configured filter over data.measurements.
    Filter(CommonArgs),
    /// Solve the batch smoothing problem over data.measurements.
    Smooth(CommonArgs),
    /// Monte-Carlo RMSE comparison across filter kinds.
    Compare(CommonArgs),
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    let args = match command {
        Command::Simulate(a) | Command::Filter(a) | Command::Smooth(a) | Command::Compare(a) => a,
    };
    let cfg = RunConfig::load(&args.config)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Io {
        path: args.out.clone(),
        source: e,
    })?;
    match command {
        Command::Simulate(_) => commands::simulate(&cfg, &args.out, args.seed),
        Command::Filter(_) => commands::filter(&cfg, &args.out),
        Command::Smooth(_) => commands::smooth(&cfg, &args.out),
        Command::Compare(_) => commands::compare(&cfg, &args.out, args.seed),
    }
}

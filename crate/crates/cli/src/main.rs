//! `knrm`: synthetic corpora, K-NRM training farms, evaluation, consistency
//! reports and ensembles, all driven by one experiment config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "knrm", version, about = "Kernel-pooling neural ranking: training variance and ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `experiment.output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Number of trials; overrides `experiment.trials`.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Base seed; overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic click log, vocabulary and hidden-truth labels.
    Gen,
    /// Train one model per seed and write artifacts, epoch logs and a manifest.
    Train,
    /// Evaluate every trained trial on the test queries.
    Eval,
    /// Statistics, agreement histograms, patterns, heat maps and ensemble tables.
    Report,
    /// Build and evaluate ensembles with the configured selection method.
    Ensemble,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.experiment.seed = Some(seed);
    }
    if let Some(trials) = cli.trials {
        config.experiment.trials = trials;
    }
    config.validate()?;
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let out = commands::output_dir(&config, cli.out);
    match cli.command {
        Command::Gen => commands::gen(&config, &out),
        Command::Train => commands::train(&config, &out),
        Command::Eval => commands::eval(&config, &out),
        Command::Report => commands::report(&config, &out),
        Command::Ensemble => commands::ensemble(&config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

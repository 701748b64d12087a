//! `ctds` — continuous-time discrete-space movement-model pipeline.
//!
//! Every subcommand reads one declarative TOML config (see README) and
//! writes its outputs into the configured output directory. All randomness
//! flows from the config seed, so a given config reproduces its outputs
//! byte for byte.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "ctds",
    about = "Drivers of animal movement from telemetry via CTDS Markov-chain models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the CTCRW movement model and draw K imputed paths.
    Impute {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reduce imputed paths to cells and residence times.
    Discretize {
        #[arg(long)]
        config: PathBuf,
        /// Imputed-path CSVs; defaults to the impute outputs in output_dir.
        inputs: Vec<PathBuf>,
    },
    /// Full estimation pipeline (estimator from the config).
    Fit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cross-validate the lasso penalty on the stacked design.
    Cv {
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate a CTDS path and thin it to synthetic telemetry.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Repeated simulate-and-estimate study (summary table).
    RecoveryStudy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Composition-sampled posterior (Gaussian or lasso prior).
    Bayes {
        #[arg(long)]
        config: PathBuf,
    },
}

fn init_threads(config: &RunConfig) {
    let mut threads = config.threads;
    if threads == 0 {
        if let Ok(v) = std::env::var("CTDS_THREADS") {
            threads = v.parse().unwrap_or(0);
        }
    }
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Impute { config } => {
            let config = RunConfig::load(config)?;
            init_threads(&config);
            commands::cmd_impute(&config)
        }
        Command::Discretize { config, inputs } => {
            let config = RunConfig::load(config)?;
            init_threads(&config);
            commands::cmd_discretize(&config, inputs)
        }
        Command::Fit { config } => {
            let config = RunConfig::load(config)?;
            init_threads(&config);
            commands::cmd_fit(&config)
        }
        Command::Cv { config } => {
            let config = RunConfig::load(config)?;
            init_threads(&config);
            commands::cmd_cv(&config)
        }
        Command::Simulate { config } => {
            let config = RunConfig::load(config)?;
            init_threads(&config);
            commands::cmd_simulate(&config)
        }
        Command::RecoveryStudy { config } => {
            let config = RunConfig::load(config)?;
            init_threads(&config);
            commands::cmd_recovery_study(&config)
        }
        Command::Bayes { config } => {
            let config = RunConfig::load(config)?;
            init_threads(&config);
            commands::cmd_bayes(&config)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

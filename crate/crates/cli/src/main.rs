//! Command-line driver: `wc4dvar experiment` runs the preconditioner grid
//! for one assimilation problem and emits CSV; `wc4dvar spectra` runs the
//! eigenvalue studies.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, SpectraConfig};

#[derive(Parser)]
#[command(name = "wc4dvar", version, about = "Saddle-point preconditioner experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the saddle system over the preconditioner grid, writing
    /// experiment.csv and manifest.txt
    Experiment {
        /// key-value configuration file
        #[arg(long)]
        config: PathBuf,
        /// output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// overrides the seed from the config file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the spectral studies, writing spectra_units.csv and
    /// spectra_intervals.csv
    Spectra {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Experiment { config, out, seed } => std::fs::read_to_string(&config)
            .map_err(|e| format!("cannot read {}: {e}", config.display()))
            .and_then(|text| {
                ExperimentConfig::from_text(&text, seed).map_err(|e| e.to_string())
            })
            .and_then(|cfg| run::run_experiment(&cfg, &out).map_err(|e| e.to_string())),
        Command::Spectra { config, out, seed } => std::fs::read_to_string(&config)
            .map_err(|e| format!("cannot read {}: {e}", config.display()))
            .and_then(|text| SpectraConfig::from_text(&text, seed).map_err(|e| e.to_string()))
            .and_then(|cfg| run::run_spectra(&cfg, &out).map_err(|e| e.to_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nanoflow_core::Error;

/// Bayesian physics-informed networks for nanoparticle transport in a sand
/// column, with a finite-difference reference solver.
#[derive(Debug, Parser)]
#[command(name = "nanoflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration; defaults are used for absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving all outputs and the manifest.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference solution: breakthrough and retention CSVs.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Noisy synthetic observations from the reference solution.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Variational training of both networks with known kinetics.
    TrainForward {
        #[command(flatten)]
        common: Common,
    },
    /// Variational training that also infers the kinetic rates from data.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Observations CSV (`kind,coord,value,truth`).
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Posterior predictive ensemble from a checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Variational checkpoint written by train-forward or invert.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Self-tests: gradients, KL identities, stratification, mass balance.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("NANOFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("NANOFLOW_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Solve { common } => commands::solve(&common),
        Command::Synth { common } => commands::synth(&common),
        Command::TrainForward { common } => commands::train_forward(&common),
        Command::Invert { common, dataset } => commands::invert(&common, &dataset),
        Command::Predict { common, checkpoint } => commands::predict(&common, &checkpoint),
        Command::Check { common } => commands::check(&common),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

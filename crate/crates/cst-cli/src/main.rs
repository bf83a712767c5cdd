//! Command line entry point for the scatter tomography toolkit.

mod commands;
mod config;
mod error;
mod system;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Method;
use config::load_config;
use error::CliError;

#[derive(Parser)]
#[command(name = "cst", version, about = "Compton scatter tomography toolkit")]
struct Cli {
    /// Worker thread cap; 1 selects the bit-exact sequential path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble the system operator and generate a phantom dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Invert one sinogram with a classical solver or the trained network.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Sinogram file to invert.
        #[arg(long)]
        input: PathBuf,
        /// Trained checkpoint; required for the network method.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference image; enables the metrics table.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Train the unrolled network on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one dataset split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Time the regularizer variants, or sweep checkpoints over depth.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma separated block variants: ll, fullres.
        #[arg(long, default_value = "ll,fullres")]
        variants: String,
        /// Comma separated square image sizes for the block timings.
        #[arg(long, default_value = "64,128")]
        sizes: String,
        /// Checkpoints to score as an unrolling depth sweep.
        #[arg(long, value_delimiter = ',')]
        t_sweep: Vec<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("CST_THREADS") {
            Ok(v) if !v.is_empty() => Some(v.parse().map_err(|_| {
                CliError::Config(format!("CST_THREADS must be a positive integer, got {v}"))
            })?),
            _ => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("thread count must be at least 1".into()));
        }
        cst_core::parallel::configure_threads(n).map_err(CliError::Config)?;
    }
    match cli.command {
        Command::Simulate { config } => commands::cmd_simulate(&load_config(&config)?),
        Command::Reconstruct { config, method, input, checkpoint, ground_truth } => {
            commands::cmd_reconstruct(
                &load_config(&config)?,
                method,
                &input,
                checkpoint.as_deref(),
                ground_truth.as_deref(),
            )
        }
        Command::Train { config, resume } => {
            commands::cmd_train(&load_config(&config)?, resume.as_deref())
        }
        Command::Evaluate { config, checkpoint, split } => {
            commands::cmd_evaluate(&load_config(&config)?, &checkpoint, &split)
        }
        Command::Bench { config, variants, sizes, t_sweep } => {
            commands::cmd_bench(&load_config(&config)?, &variants, &sizes, &t_sweep)
        }
    }
}

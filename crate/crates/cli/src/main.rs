//! `mcunet` command-line front end.
//!
//! Exit codes: 0 success, 1 verification or computation failure, 2 input
//! error. Failures print one line to stderr: `error: <kind>: <message>`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Outcome;

#[derive(Parser)]
#[command(
    name = "mcunet",
    version,
    about = "Retinal vessel segmentation with MC-UNet"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset and write checkpoints, logs and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the probability map of one image as an 8-bit PGM.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split of a manifest.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Manifest JSON, or a dataset directory using the default split.
        #[arg(long)]
        manifest: PathBuf,
        /// Dataset name used when `--manifest` is a directory.
        #[arg(long, default_value = "DRIVE")]
        dataset_name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the four DAC/MKP combinations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every operator and the whole network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run cases whose name contains this text.
        #[arg(long)]
        only: Option<String>,
        /// Perturb the analytic gradient of the named case.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => commands::cmd_train(&config, out),
        Command::Predict { model, image, out } => commands::cmd_predict(&model, &image, &out),
        Command::Evaluate {
            model,
            manifest,
            dataset_name,
            out,
        } => commands::cmd_evaluate(&model, &manifest, &dataset_name, &out),
        Command::Ablate { config, out } => commands::cmd_ablate(&config, out),
        Command::Gradcheck {
            seed,
            only,
            corrupt,
        } => commands::cmd_gradcheck(seed, corrupt, only),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(commands::Failure(msg))) => {
            eprintln!("error: verification: {}", one_line(&msg));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

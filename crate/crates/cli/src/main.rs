//! `vesselnext`: preprocess fundus images, train, segment, evaluate and
//! report model cost.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;
use vesselnext::pipeline::Split;

use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Run(#[from] vesselnext::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(vesselnext::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "vesselnext", version, about = "Retinal vessel segmentation with a hybrid CNN-Transformer U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the preprocessed image of every manifest entry as a 16-bit PGM
    Preprocess {
        /// Only this split (train, val or test)
        #[arg(long)]
        split: Option<Split>,
    },
    /// Train on the train split, stopping early on the val split
    Train {
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment one image
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Score a manifest split against its truth inside the field of view
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Print the per-layer parameter and multiply-accumulate table
    Cost,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("VESSELNEXT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("VESSELNEXT_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let o = &cli.overrides;
    match &cli.command {
        Command::Preprocess { split } => commands::preprocess_cmd(o, *split),
        Command::Train { resume } => commands::train_cmd(o, resume.as_deref()),
        Command::Segment { checkpoint, image } => commands::segment_cmd(o, checkpoint, image),
        Command::Eval { checkpoint, split } => commands::eval_cmd(o, checkpoint, *split),
        Command::Cost => commands::cost_cmd(o),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = format!(
        "Configuration file keys and their defaults (flags override the file; paths are relative to it):\n{}",
        RunConfig::documented_defaults()
    );
    let matches = Cli::command()
        .mut_subcommands(|c| c.after_long_help(help.clone()))
        .after_long_help(help)
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Command-line front end: generate synthetic task banks, train meta and
//! baseline detectors, evaluate them under the leave-one-subject-out,
//! cross-bank, and step-sweep protocols, and dump bank statistics.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{cmd_eval, cmd_stats, cmd_synth, cmd_train, Fold, Protocol, TrainMode};

#[derive(Parser)]
#[command(
    name = "metafew",
    about = "Few-shot adaptation of binary detectors over subject x attribute task banks",
    version
)]
struct Cli {
    /// Configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory all configured paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Override one config field, e.g. --set meta.alpha=0.1 (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task bank and write its manifest.
    Synth,
    /// Train detectors and write checkpoints.
    Train {
        #[arg(long, value_enum)]
        mode: TrainMode,
        /// Held-out subject id, `all` for one checkpoint per subject, or
        /// `none` to train on every task.
        #[arg(long, default_value = "all")]
        fold: Fold,
    },
    /// Evaluate checkpoints and write report files.
    Eval {
        #[arg(long, value_enum)]
        protocol: Protocol,
    },
    /// Write the per-task class-imbalance table.
    Stats,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap folds help/version into the error path; keep exit 0 there.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let config = match config::load_config(cli.config.as_deref(), &cli.sets) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Synth => cmd_synth(&config, &cli.workdir),
        Command::Train { mode, fold } => cmd_train(&config, &cli.workdir, *mode, fold),
        Command::Eval { protocol } => cmd_eval(&config, &cli.workdir, *protocol),
        Command::Stats => cmd_stats(&config, &cli.workdir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

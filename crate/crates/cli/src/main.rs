//! `egoshift`: synthetic data, training, inference, ensembling, evaluation
//! and gradient checks.
//!
//! Exit codes: 0 success, 1 failed checks or I/O errors, 2 invalid input or
//! configuration, 3 non-finite values during training.

mod commands;
mod zoo;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use egoshift::config::Family;
use egoshift::videodata::{Split, SynthConfig};
use egoshift::Error;

#[derive(Parser)]
#[command(name = "egoshift", version, about = "Gate-shift and attention-recurrent video action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shape dataset (manifest plus clip tensors).
    Synth {
        #[arg(long)]
        seed: u64,
        /// Total clips across the train, test_s1 and test_s2 splits.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        /// Frame height and width.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train the configured model families and write per-stage checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every clip of a split with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Split,
        /// Defaults to the manifest the checkpoint was trained on.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Average two clips from the two temporal halves [default: true].
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        two_clip: Option<bool>,
        /// Fully convolutional spatial inference [default: true for gsn, false for egoaco].
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        fully_conv: Option<bool>,
        /// Short side for fully convolutional inference, or the crop side
        /// otherwise [default: training frame size].
        #[arg(long)]
        short_side: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the scores of several models clip by clip.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1/top-5 accuracy and macro precision/recall of a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: Split,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference check of every layer type and the full models.
    Gradcheck {
        /// gsn, egoaco or gsn+egoaco [default: both].
        #[arg(long)]
        family: Option<Family>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the adjoint of one op kind (negative control).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => 3,
        Some(Error::Io(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn init_threads() -> Result<(), String> {
    match std::env::var("EGOSHIFT_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                egoshift::parallel::init_thread_pool(n);
                Ok(())
            }
            _ => Err(format!("EGOSHIFT_THREADS must be a positive integer, got `{v}`")),
        },
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Synth {
            seed,
            n,
            out,
            force,
            frames,
            size,
        } => commands::synth(&commands::SynthArgs {
            seed,
            n,
            out,
            force,
            synth: SynthConfig {
                frames,
                height: size,
                width: size,
                ..SynthConfig::default()
            },
        })?,
        Command::Train { config, out } => commands::train(&config, &out)?,
        Command::Infer {
            checkpoint,
            split,
            manifest,
            two_clip,
            fully_conv,
            short_side,
            out,
        } => commands::infer(&commands::InferArgs {
            checkpoint,
            manifest,
            split,
            two_clip,
            fully_conv,
            short_side,
            out,
        })?,
        Command::Ensemble { scores, out } => commands::ensemble(&scores, &out)?,
        Command::Eval {
            scores,
            manifest,
            split,
            json,
        } => commands::evaluate(&scores, &manifest, split, json.as_deref())?,
        Command::Gradcheck {
            family,
            seed,
            inject_fault,
        } => return commands::gradcheck(family, seed, inject_fault.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

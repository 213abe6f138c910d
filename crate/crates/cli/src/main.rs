//! `mstts` — prepare features, run the three training stages, synthesize
//! mels, and evaluate, all from one reproducible config.

mod common;
mod evaluate;
mod prepare;
mod synthesize;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mstts_core::error::Error;

#[derive(Parser)]
#[command(
    name = "mstts",
    version,
    about = "Multi-scale speaking-style TTS pipeline",
    after_help = "Exit codes: 0 success, 2 usage, 3 missing input, \
                  4 invariant violation, 5 numeric failure, 6 partial report, \
                  7 external dependency."
)]
struct Cli {
    /// Pipeline config file (TOML); overrides the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Model size preset: `tiny` (desk scale) or `default` (production scale).
    #[arg(long, global = true, default_value = "tiny")]
    preset: String,

    /// Root seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Working directory for caches, checkpoints, metrics and reports.
    #[arg(long, global = true, default_value = "work")]
    work_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the feature cache from a manifest or a synthetic toy corpus.
    Prepare {
        /// JSON-lines manifest of {id, text, audio_path, alignment_path,
        /// order_index} records.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Generate a deterministic toy corpus of N utterances instead.
        #[arg(long, value_name = "N")]
        toy: Option<usize>,
    },
    /// Run one training stage (1: extractor+acoustic, 2: distillation,
    /// 3: joint fine-tune).
    Train {
        #[arg(long)]
        stage: u8,
        /// Continue from the stage's saved checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps (testing aid).
        #[arg(long, hide = true, value_name = "STEPS")]
        halt_after: Option<usize>,
    },
    /// Predict styles from context and synthesize mel cache blobs.
    Synthesize {
        /// Comma-separated utterance ids (defaults to the whole manifest).
        #[arg(long)]
        ids: Option<String>,
        /// Checkpoint to load (defaults to work-dir/stage3.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write placeholder waveforms next to the mel blobs.
        #[arg(long)]
        wav: bool,
    },
    /// Objective evaluation: DTW-aligned F0/energy RMSE and duration MSE.
    Evaluate {
        /// Compare ground truth against itself (all metrics must be 0).
        #[arg(long)]
        ground_truth: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which chapter split to evaluate: `eval` or `train`.
        #[arg(long, default_value = "eval")]
        split: String,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MissingInput(_) | Error::Io(_) => 3,
        Error::InvalidInput(_) | Error::Contract(_) | Error::Format(_) => 4,
        Error::Numeric(_) => 5,
        Error::External(_) => 7,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match common::RunContext::build(
        cli.config.as_deref(),
        &cli.preset,
        cli.seed,
        &cli.work_dir,
    ) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };

    let result = match &cli.command {
        Command::Prepare { manifest, toy } => prepare::run(&ctx, manifest.as_deref(), *toy),
        Command::Train {
            stage,
            resume,
            halt_after,
        } => train::run(&ctx, *stage, *resume, *halt_after),
        Command::Synthesize {
            ids,
            checkpoint,
            wav,
        } => synthesize::run(&ctx, ids.as_deref(), checkpoint.as_deref(), *wav),
        Command::Evaluate {
            ground_truth,
            checkpoint,
            split,
        } => evaluate::run(&ctx, *ground_truth, checkpoint.as_deref(), split),
    };

    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

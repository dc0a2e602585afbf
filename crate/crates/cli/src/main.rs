//! Command-line pipeline: synthetic cohorts, pair enumeration, training,
//! evaluation, gradient checking, and interpretability export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memgcn::error::Error;

use config::{SynthOverrides, TrainOverrides};

/// Exit codes: 0 success, 1 check failure, 2 usage/validation, 3 numerical
/// abort.
const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "memgcn",
    version,
    about = "Memory-augmented spectral graph convolution over paired brain-connectivity acquisitions"
)]
struct Cli {
    /// Plain-text `key = value` config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality cohort on disk.
    Synth {
        /// Output directory for the manifest and data files.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: SynthOverrides,
    },
    /// Enumerate acquisition pairs and fold assignments for a cohort.
    Pairs {
        /// Cohort manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k_folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a cohort with k-fold cross validation.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only this fold (default: all folds).
        #[arg(long)]
        fold: Option<usize>,
        /// Also train a baseline instead of the full model: raw_edges | mlp.
        #[arg(long)]
        baseline: Option<memgcn::training::BaselineKind>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on its held-out fold.
    Eval {
        /// Checkpoint `.bin` path (the `.json` sidecar sits next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fold whose internal pairs form the test set.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Check every analytic gradient against central differences on a tiny
    /// model; exits 1 if any parameter group exceeds the threshold.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pass threshold on the max relative error.
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
    /// Interpretability reports from a trained checkpoint.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// roi | edges | attention
        #[arg(long)]
        mode: commands::InterpretMode,
        /// Acquisition id for attention export.
        #[arg(long)]
        acquisition: Option<String>,
        /// List length for edge reports.
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        /// Subsample report pairs to at most this many (seeded).
        #[arg(long)]
        max_pairs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let result = match &cli.command {
        Command::Synth { out, overrides } => commands::cmd_synth(cli.config.as_deref(), out, overrides),
        Command::Pairs {
            manifest,
            out,
            k_folds,
            seed,
        } => commands::cmd_pairs(cli.config.as_deref(), manifest, out, *k_folds, *seed),
        Command::Train {
            manifest,
            out,
            fold,
            baseline,
            overrides,
        } => commands::cmd_train(cli.config.as_deref(), manifest, out, *fold, *baseline, overrides),
        Command::Eval {
            checkpoint,
            manifest,
            out,
            fold,
        } => commands::cmd_eval(checkpoint, manifest, out, *fold),
        Command::Gradcheck { h, seed, threshold } => {
            return match commands::cmd_gradcheck(*h, *seed, *threshold) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
                Err(e) => report(e),
            }
        }
        Command::Interpret {
            checkpoint,
            manifest,
            out,
            mode,
            acquisition,
            top_k,
            max_pairs,
            sample_seed,
        } => commands::cmd_interpret(
            checkpoint,
            manifest,
            out,
            *mode,
            acquisition.as_deref(),
            *top_k,
            *max_pairs,
            *sample_seed,
        ),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: Error) -> ExitCode {
    log::error!("{e}");
    match e {
        Error::Numerical(_) => ExitCode::from(EXIT_NUMERICAL),
        _ => ExitCode::from(EXIT_USAGE),
    }
}

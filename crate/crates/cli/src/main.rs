//! `barkid`: scan, rebalance, train, evaluate, cross-validate and predict.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and 3 for
//! failures while running.

mod commands;
mod config;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use barkid::model::Backbone;
use barkid::preprocess::Interpolation;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "barkid", version, about = "Bark-texture tree species classification")]
struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-directory corpus and write its manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail on empty class directories.
        #[arg(long)]
        strict: bool,
    },
    /// Rebalance a manifest to a fixed count per class.
    Rebalance {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for augmented images, the new manifest and provenance.
        #[arg(long)]
        out: PathBuf,
        /// Augmentation settings and seed come from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebalance, split, train and evaluate; writes a full run directory.
    Train(RunArgs),
    /// Evaluate a checkpoint on a manifest or one side of a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `split.json` from a training run.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum)]
        subset: Option<Subset>,
        /// Where to write the reports; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "bilinear")]
        interpolation: InterpolationArg,
    },
    /// K-fold cross-validation with a fresh model per fold.
    Crossval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Rank the classes for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        json: bool,
        #[arg(long, value_enum, default_value = "bilinear")]
        interpolation: InterpolationArg,
    },
    /// Train once and record test metrics at several epoch counts.
    SweepEpochs {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated epochs, e.g. 20,32,50,100.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpolationArg {
    Bilinear,
    Nearest,
}

impl From<InterpolationArg> for Interpolation {
    fn from(a: InterpolationArg) -> Self {
        match a {
            InterpolationArg::Bilinear => Interpolation::Bilinear,
            InterpolationArg::Nearest => Interpolation::Nearest,
        }
    }
}

/// A run config plus flag overrides.
#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    root: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    backbone: Option<Backbone>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    split_first: bool,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    no_pretrained: bool,
    #[arg(long)]
    freeze_backbone: bool,
    /// Leave the wall-clock column of the history empty.
    #[arg(long)]
    no_wall_time: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Ingest { root, out, strict } => commands::ingest(&root, &out, strict),
        Command::Rebalance {
            manifest,
            out,
            config,
            target,
            seed,
        } => commands::rebalance(&manifest, &out, config.as_deref(), target, seed),
        Command::Train(run) => commands::run_training(&run),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            subset,
            out,
            interpolation,
        } => commands::evaluate(
            &checkpoint,
            &manifest,
            split.as_deref(),
            subset,
            out.as_deref(),
            interpolation.into(),
        ),
        Command::Crossval { run, k } => commands::crossval(&run, k),
        Command::Predict {
            checkpoint,
            image,
            top,
            json,
            interpolation,
        } => commands::predict(&checkpoint, &image, top, json, interpolation.into()),
        Command::SweepEpochs { run, checkpoints } => commands::sweep(&run, &checkpoints),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}

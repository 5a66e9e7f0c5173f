//! `flowdet`: gradient checks, training, evaluation, dataset statistics and
//! cost benchmarks for the toy detector.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage or
//! configuration error.

mod commands;
mod config;
mod scenes;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "flowdet",
    version,
    about = "Toy deformable/scale-aware detector toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Model configuration (TOML); an optional `[train]` table sets training options.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model and scene seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Repeat for more progress output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every differentiable operator and the micro model.
    Gradcheck {
        /// Replace this case's backward pass with a deliberately wrong one.
        #[arg(long, value_name = "OP")]
        inject_faulty: Option<String>,
    },
    /// Train on synthetic scenes or an annotated directory.
    Train {
        /// `synthetic`, or a directory / annotation file with PPM images.
        #[arg(long, default_value = "synthetic")]
        data: String,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this step; the schedule still spans the configured total.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint, or a detection file against annotations.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `synthetic` (the held-out split), or an annotation file / directory.
        #[arg(long, default_value = "synthetic")]
        data: String,
        /// COCO results JSON to score instead of running a model.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Per-split category counts of an annotation file.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<split>.txt` image id lists; defaults to embedded splits.
        #[arg(long)]
        splits: Option<PathBuf>,
    },
    /// FLOPs, parameters and latency across a sweep.
    Bench {
        #[arg(long, value_enum, default_value = "ablation")]
        sweep: Sweep,
        /// Timed forward passes per row.
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Train every row for this many steps and report held-out AP.
        #[arg(long, default_value_t = 0)]
        train_steps: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Window,
    Reduction,
    Ablation,
    Gate,
}

pub enum Outcome {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rc = match RunConfig::load(cli.config.as_deref(), cli.seed, &cli.out, cli.verbose) {
        Ok(rc) => rc,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let run = match cli.command {
        Command::Gradcheck { inject_faulty } => commands::gradcheck(&rc, inject_faulty.as_deref()),
        Command::Train {
            data,
            checkpoint,
            steps,
        } => commands::train(rc, &data, checkpoint.as_deref(), steps),
        Command::Eval {
            checkpoint,
            data,
            detections,
        } => commands::eval(&rc, checkpoint.as_deref(), &data, detections.as_deref()),
        Command::Stats { data, splits } => commands::stats(&rc, &data, splits.as_deref()),
        Command::Bench {
            sweep,
            iters,
            train_steps,
        } => commands::bench(&rc, sweep, iters, train_steps),
    };
    match run {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

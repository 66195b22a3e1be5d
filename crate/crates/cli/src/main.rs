//! `tufa`: synthesize data, train, fine-tune, evaluate, query and plot.
//!
//! Failures print one line `error[<kind>]: <message>` to stderr and exit
//! with 2 (usage), 3 (data) or 4 (numeric).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tufa::data::synth::SchemeKind;
use tufa::error::ErrorKind;
use tufa::eval::NormMode;
use tufa::TufaError;

use config::Overrides;

#[derive(Parser)]
#[command(name = "tufa", version, about = "Structure-prompt face alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct Metrics {
    /// Failure-rate / AUC threshold (repeatable).
    #[arg(long = "alpha")]
    alphas: Vec<f64>,
    /// NME normalization: ocular, pupil or box.
    #[arg(long)]
    norm: Option<NormMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (PNG crops + canonical annotations).
    Synth {
        #[arg(long, default_value = "a")]
        scheme: SchemeKind,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Crop side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model from scratch on one or more datasets.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or annotation file (repeatable).
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
    },
    /// Fine-tune a checkpoint on the first K samples of a new dataset.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        shots: usize,
    },
    /// Score a checkpoint on a labeled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        metrics: Metrics,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Query arbitrary plane points on a dataset's images.
    Zeroshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        metrics: Metrics,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// CSV of plane points, one `x,y` per line.
        #[arg(long, conflicts_with = "n_pre")]
        points_file: Option<PathBuf>,
        /// Number of random scratch points (drawn with --seed).
        #[arg(long, required_unless_present = "points_file")]
        n_pre: Option<usize>,
    },
    /// Draw CED curves from reports (JSON) or CED CSV files.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Right end of the NME axis.
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
    },
}

fn overrides(common: &Common, metrics: Option<&Metrics>, datasets: &[PathBuf]) -> Overrides {
    Overrides {
        seed: common.seed,
        workers: common.workers,
        alphas: metrics.map(|m| m.alphas.clone()).unwrap_or_default(),
        norm: metrics.and_then(|m| m.norm),
        datasets: datasets.to_vec(),
    }
}

fn run(cli: Cli) -> tufa::Result<()> {
    match cli.command {
        Command::Synth {
            scheme,
            count,
            seed,
            size,
            out,
            force,
        } => commands::synth(scheme, count, seed, size, &out, force),
        Command::Train { common, datasets } => {
            let cfg = commands::prepare(&common.out, common.config.as_deref(), &overrides(&common, None, &datasets), common.force)?;
            commands::train(&cfg, &common.out)
        }
        Command::Fewshot {
            common,
            checkpoint,
            dataset,
            shots,
        } => {
            let o = overrides(&common, None, std::slice::from_ref(&dataset));
            let cfg = commands::prepare(&common.out, common.config.as_deref(), &o, common.force)?;
            commands::fewshot(&cfg, &common.out, &checkpoint, shots)
        }
        Command::Eval {
            common,
            metrics,
            checkpoint,
            dataset,
        } => {
            let o = overrides(&common, Some(&metrics), std::slice::from_ref(&dataset));
            let cfg = commands::prepare(&common.out, common.config.as_deref(), &o, common.force)?;
            commands::eval(&cfg, &common.out, &checkpoint)
        }
        Command::Zeroshot {
            common,
            metrics,
            checkpoint,
            dataset,
            points_file,
            n_pre,
        } => {
            let o = overrides(&common, Some(&metrics), std::slice::from_ref(&dataset));
            let cfg = commands::prepare(&common.out, common.config.as_deref(), &o, common.force)?;
            let query = match (points_file, n_pre) {
                (Some(p), _) => commands::Query::File(p),
                (None, Some(n)) => commands::Query::Scratch(n),
                (None, None) => unreachable!("clap requires one of them"),
            };
            commands::zeroshot(&cfg, &common.out, &checkpoint, query)
        }
        Command::Plot { inputs, out, alpha } => commands::plot(&inputs, &out, alpha),
    }
}

fn exit_code(e: &TufaError) -> (u8, &'static str) {
    match e.kind() {
        ErrorKind::Usage => (2, "usage"),
        ErrorKind::Data => (3, "data"),
        ErrorKind::Numeric => (4, "numeric"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let summary: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.is_empty() && !l.starts_with("Usage:"))
                .collect();
            eprintln!("error[usage]: {}", summary.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}

//! `clove`: pretraining, evaluation, ablation grids, match dumps and metric
//! plots from the command line.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clove::CloveError;

#[derive(Parser)]
#[command(name = "clove", version, about = "Dense self-supervised pretraining with contextualized local embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// `key=value` configuration file; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set steps=10`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch or from a checkpoint; writes metrics.csv, final.ckpt and config.txt.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from this checkpoint; later metrics rows in the output are replaced.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save the checkpoint every this many steps (0: only at the end).
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
        /// Stop after this step, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
        /// No progress lines on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Dense correspondence and linear-probe report for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus seed of the evaluation images (defaults to `data.seed`).
        #[arg(long)]
        corpus_seed: Option<u64>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a grid for every seed.
    Ablate {
        /// Grid file, one cell per line: `cell_id key=value ...`. Defaults to the standard grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Table destination.
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Dump the positive pairs between two views of one corpus image.
    MatchDebug {
        #[command(flatten)]
        config: ConfigArgs,
        /// Index of the training image.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// View seed (defaults to CLOVE_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Use the full uncropped image for both views.
        #[arg(long)]
        identity: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One SVG line chart per metric column of a metrics CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

/// Failure with its exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, configuration or missing inputs.
    Usage(String),
    /// Malformed input data.
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<CloveError> for Failure {
    fn from(e: CloveError) -> Self {
        let msg = e.to_string();
        match e {
            CloveError::Config { .. } => Failure::Usage(msg),
            CloveError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Usage(msg),
            CloveError::Checkpoint { .. } | CloveError::Data { .. } => Failure::Data(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain {
            config,
            out,
            resume,
            checkpoint_every,
            stop_after,
            quiet,
        } => commands::pretrain(&config, &out, resume.as_deref(), checkpoint_every, stop_after, quiet),
        Command::Eval {
            checkpoint,
            config,
            corpus_seed,
            out,
        } => commands::eval(&checkpoint, &config, corpus_seed, out.as_deref()),
        Command::Ablate { grid, config, seeds, out } => commands::ablate(grid.as_deref(), &config, &seeds, &out),
        Command::MatchDebug {
            config,
            image,
            seed,
            identity,
            out,
        } => commands::match_debug(&config, image, seed, identity, out.as_deref()),
        Command::Plot { metrics, out } => plot::plot_metrics(&metrics, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

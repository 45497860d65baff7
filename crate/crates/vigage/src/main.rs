//! `vigage` — train, evaluate, and inspect patch-graph age estimators.
//!
//! Exit codes: 0 success, 2 usage/validation error, 3 training divergence,
//! 4 failed gradient verification. Results go to standard output; progress
//! and warnings go to standard error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vigage::cli::{self, TrainArgs};

#[derive(Parser)]
#[command(name = "vigage", version, about = "Facial age estimation over image patch graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (PGM images + labels.csv).
    Synth {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples (≥ 1).
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image size as HxW; both sides must be multiples of the patch grid.
        #[arg(long, default_value = "64x64")]
        size: String,
    },
    /// Train on a dataset directory (images + labels.csv).
    Train {
        /// Dataset directory containing labels.csv.
        #[arg(long)]
        data: PathBuf,
        /// JSON config file with flat keys; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Repeat training with seeds seed, seed+1, ..., seed+repeats-1.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Write the best-validation run's parameters here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Append per-epoch `epoch,train_mae,val_mae` CSV rows here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset; prints `mae=<value>`.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict one image's age; prints `age=<value>`.
    Infer {
        /// PGM/PPM image matching the checkpoint's expected size.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump an image's patch-level weighted k-NN graph as `i<TAB>j<TAB>alpha` lines.
    InspectGraph {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match &args.command {
        Command::Synth { out, n, seed, size } => cli::cmd_synth(out, *n, *seed, size),
        Command::Train { data, config, epochs, seed, repeats, checkpoint, log } => {
            cli::cmd_train(&TrainArgs {
                data,
                config: config.as_deref(),
                epochs: *epochs,
                seed: *seed,
                repeats: *repeats,
                checkpoint: checkpoint.as_deref(),
                log: log.as_deref(),
            })
        }
        Command::Eval { data, checkpoint } => cli::cmd_eval(data, checkpoint),
        Command::Infer { image, checkpoint } => cli::cmd_infer(image, checkpoint),
        Command::Gradcheck { seed } => cli::cmd_gradcheck(*seed),
        Command::InspectGraph { image, config, out } => {
            cli::cmd_inspect_graph(image, config.as_deref(), out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e))
        }
    }
}

//! `dualsep`: generate toy corpora, train, separate, evaluate, run the
//! ablation and sweep harnesses, and check gradients.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error (bad config,
//! paths, shapes, config mismatch), 3 numerical error (divergence, broken
//! numerical contracts, failed gradient checks).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dualsep", version, about = "Dual-branch diffusion separation of two-source image mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of a config file, as `key=value`.
#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// Override one config key, e.g. `--set gamma=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: PPM images plus manifest.tsv.
    MakeDataset {
        /// Dataset spec file (`key = value` lines); built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train both denoisers and both suppression networks.
    Train {
        /// Training config file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Seed for every random stream; overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Print every n-th loss line.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Separate one mixture image into two outputs.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Mixture image (binary PPM).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out1: PathBuf,
        #[arg(long)]
        out2: PathBuf,
        /// Config the checkpoint must have been trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the checkpoint even if its config hash differs.
        #[arg(long)]
        force: bool,
        /// Sampling seed; defaults to the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Suppression schedule.
        #[arg(long, value_enum, default_value_t = commands::Wsm::Full)]
        wsm: commands::Wsm,
    },
    /// Separate the test split of a corpus and score it.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory written by make-dataset.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Score only the first n test samples (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
        #[arg(long, value_enum, default_value_t = commands::Wsm::Full)]
        wsm: commands::Wsm,
        /// Write per-sample metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train per seed and compare the four suppression placements; optionally
    /// run the gamma and alpha sweeps.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Directory for CSV outputs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also sweep gamma over these values (comma-separated).
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
        /// Also sweep the insertion index over these values (comma-separated).
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<u32>,
        /// Skip the four-configuration table (sweeps only).
        #[arg(long)]
        no_table: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        /// denoiser, unet3, wfca, wfen, wfen-loss or all.
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

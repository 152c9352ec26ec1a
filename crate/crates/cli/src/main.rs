//! Command-line pipeline around the core library: `train`, `score`, `evaluate` and a
//! single-image `reconstruct` demo.

mod commands;
mod config;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sinodiff", version, about = "Sparse-view CT diffusion prior with OOD scoring")]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true, default_value = "sinodiff.toml")]
    config: PathBuf,

    /// Override the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for reconstruction and scoring (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Override the reconstruction cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Override the simulated measurement noise level.
    #[arg(long, global = true)]
    noise_std: Option<f32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser on the configured in-distribution digit.
    Train {
        /// Continue from the existing checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Build test sets, fit validation statistics and write per-image score tables.
    Score {
        /// Checkpoint path (default: <out_dir>/checkpoint.tdnz).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Turn score tables into AUC tables with bootstrap confidence intervals.
    Evaluate,
    /// Reconstruct a single test image across all start steps and dump a PGM strip.
    Reconstruct {
        /// Digit to draw the demo image from (default: the ID digit).
        #[arg(long)]
        digit: Option<u8>,
        /// Index within that digit's test images.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Number of projection angles for the simulated acquisition.
        #[arg(long, default_value_t = 5)]
        n_proj: usize,
        /// Also run the full CT reconstruction (slow).
        #[arg(long)]
        ct: bool,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(workers).build_global()?;
    }
    let mut cfg = config::RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.cache_dir {
        cfg.paths.cache_dir = Some(dir);
    }
    if let Some(noise) = cli.noise_std {
        cfg.conditioning.noise_std = noise;
    }

    match cli.command {
        Command::Train { resume } => commands::train(&cfg, resume),
        Command::Score { checkpoint } => commands::score(&cfg, checkpoint),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Reconstruct { digit, index, n_proj, ct } => {
            commands::reconstruct(&cfg, digit, index, n_proj, ct)
        }
    }
}

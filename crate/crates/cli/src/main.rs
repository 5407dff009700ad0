//! Configuration-driven experiment runner for differentially private
//! training with interchangeable clipping strategies.

// `!(x > 0.0)`-style guards deliberately treat NaN as invalid.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod experiment;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "fairclip", version, about = "DP training with hard, soft, and adaptive per-sample clipping")]
struct Cli {
    /// Worker threads for per-sample gradient work; never affects results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default: $FAIRCLIP_OUT_DIR or ./fairclip-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the noise multiplier hitting the configured (epsilon, delta).
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Renyi order grid override, comma separated.
        #[arg(long, value_delimiter = ',')]
        orders: Vec<u32>,
    },
    /// One training run at the configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// K runs at consecutive seeds plus a summary table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: u64,
        /// First seed; defaults to [train] seed from the config.
        #[arg(long)]
        base_seed: Option<u64>,
    },
    /// Disparity, reduction, and significance tables across method dirs.
    Analyze {
        /// Two or more sweep output directories.
        dirs: Vec<PathBuf>,
        /// Divide subgroup sum losses by counts before computing gaps.
        #[arg(long)]
        mean_reduction: bool,
    },
    /// Before/after clipping norms per subgroup for one result dir.
    Gradstats {
        dir: PathBuf,
    },
}

fn out_dir(cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| std::env::var_os("FAIRCLIP_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("fairclip-out"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("--threads: {e}")))?;
    }
    let out = out_dir(cli.out);
    match &cli.command {
        Command::Calibrate { config, orders } => commands::cmd_calibrate(config, orders, &out),
        Command::Train { config } => commands::cmd_train(config, &out),
        Command::Sweep { config, seeds, base_seed } => {
            commands::cmd_sweep(config, *seeds, *base_seed, &out)
        }
        Command::Analyze { dirs, mean_reduction } => {
            commands::cmd_analyze(dirs, *mean_reduction, &out)
        }
        Command::Gradstats { dir } => commands::cmd_gradstats(dir, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}

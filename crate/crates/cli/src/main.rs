//! `fasgnn`: datasets, training, evaluation, baselines, gradient checks and
//! timing for the two-stage fluid-antenna model.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "fasgnn",
    version,
    about = "Two-stage GNN for fluid-antenna placement and beamforming"
)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides FASGNN_OUT and the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaselineMethod {
    Mrt,
    Zf,
    Grid,
    Oracle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Layout {
    Full,
    Half,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset of user angles.
    GenData {
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of users.
        #[arg(long)]
        users: Option<usize>,
        #[arg(long, default_value = "dataset")]
        name: String,
        /// Also write a CSV copy.
        #[arg(long)]
        csv: bool,
    },
    /// Train on a dataset and keep the best checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one or more datasets.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Datasets, possibly with a different number of users.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Run a classical baseline or the position oracle.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        layout: Layout,
        /// Evaluate only the first samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Finite-difference checks: `all`, `pipeline` or a primitive name.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Forward wall-clock per sample.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let out = cfg.output_dir(cli.out.as_deref());
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::GenData {
            size,
            seed,
            users,
            name,
            csv,
        } => commands::gen_data(cfg, &out, size, seed, users, &name, csv),
        Command::Train { data } => commands::train(&cfg, &out, data),
        Command::Eval { checkpoint, data } => commands::eval(&cfg, &out, checkpoint, data),
        Command::Baseline {
            method,
            data,
            layout,
            limit,
        } => commands::baseline(&cfg, &out, method, data, layout, limit),
        Command::Gradcheck { scope, seed } => commands::gradcheck(&cfg, &out, &scope, seed),
        Command::Bench {
            checkpoint,
            data,
            samples,
        } => commands::bench(&cfg, &out, checkpoint, data, samples),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

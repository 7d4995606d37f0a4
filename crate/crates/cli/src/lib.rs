//! Command-line driver: train, reconstruct, evaluate, check gradients and
//! benchmark the attention kernels from flat TOML run configs.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
mod error;

pub use error::{CliError, CliResult};

use config::ConfigFile;

#[derive(Debug, Parser)]
#[command(
    name = "tensorformer",
    version,
    about = "Point-cloud surface reconstruction with normalized matrix attention"
)]
pub struct Cli {
    /// Run configuration (TOML, one table per command).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command's table.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bit-reproducible execution. Every command already runs on one thread
    /// with seeded randomness, so this is always in effect.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on an analytic shape; writes model.ckpt and loss.csv.
    Train,
    /// Predict occupancy for a cloud and extract a mesh; writes mesh.obj and field.grid.
    Reconstruct,
    /// Chamfer-L1, normal consistency and IoU against a mesh or shape; writes metrics.csv.
    Eval,
    /// Finite-difference gradient checks and the gradient-spread comparison.
    Gradcheck {
        /// ops, attention, block or full; overrides the config.
        #[arg(long)]
        scope: Option<String>,
    },
    /// Time and memory of the attention kernels over k and d.
    Bench,
}

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    let g = Globals {
        seed: cli.seed,
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Train => commands::cmd_train(&cfg, &g),
        Command::Reconstruct => commands::cmd_reconstruct(&cfg, &g),
        Command::Eval => commands::cmd_eval(&cfg, &g),
        Command::Gradcheck { scope } => commands::cmd_gradcheck(&cfg, &g, scope.as_deref()),
        Command::Bench => commands::cmd_bench(&cfg, &g),
    }
}

//! Command-line front end.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "relalign",
    version,
    about = "Relation-aligned continual learning experiments"
)]
pub struct Cli {
    /// TOML or JSON configuration; a report.json is accepted as well.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.lambda=0`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train over the stream and write report.json, accuracy.csv and drift.csv.
    Run,
    /// Compare alignment strategies on shared data; writes ablation.csv.
    Ablate,
    /// Train with checkpoints and evaluate the forgetting bounds; writes theory.txt.
    Theory,
    /// Compare analytic gradients with central differences on random cases.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Write the stream as CSV files plus manifest.json.
    Export,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = config::Overrides {
        sets: cli.set,
        out: cli.out,
        seed: cli.seed,
    };
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Run => commands::cmd_run(&cfg).map(drop),
        Command::Ablate => commands::cmd_ablate(&cfg).map(drop),
        Command::Theory => commands::cmd_theory(&cfg).map(drop),
        Command::Gradcheck { corrupt } => commands::cmd_gradcheck(&cfg, corrupt).map(drop),
        Command::Export => commands::cmd_export(&cfg).map(drop),
    }
}

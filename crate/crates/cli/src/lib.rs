//! `isoprobe`: reproducible command-line pipelines over the `isoprobe-core`
//! library. Every command writes into `<out>/<command>/` and leaves a
//! manifest with content hashes of everything it read and wrote.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

pub use config::Config;
pub use error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Synth,
    Train,
    Embed,
    Analyze,
    Verify,
    Eval,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "isoprobe", version, about = "Synthetic series, attention models and embedding isotropy")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "ISOPROBE_WORKERS")]
    pub workers: Option<usize>,
}

impl Cli {
    /// Load the config and apply flag overrides.
    pub fn resolve(&self) -> CliResult<Config> {
        let mut cfg = Config::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

pub fn run_command(command: Command, cfg: &Config) -> CliResult<manifest::RunManifest> {
    match command {
        Command::Synth => commands::synth(cfg),
        Command::Train => commands::train_cmd(cfg),
        Command::Embed => commands::embed(cfg),
        Command::Analyze => commands::analyze_cmd(cfg),
        Command::Verify => commands::verify(cfg),
        Command::Eval => commands::eval_cmd(cfg),
        Command::Report => commands::report(cfg),
    }
}

/// Parse, configure the worker pool and run. Results do not depend on the
/// worker count.
pub fn run(cli: &Cli) -> CliResult<manifest::RunManifest> {
    let cfg = cli.resolve()?;
    let workers = match cli.workers {
        Some(0) => return Err(CliError::config("--workers", "must be at least 1")),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::config("--workers", e.to_string()))?;
    pool.install(|| run_command(cli.command, &cfg))
}

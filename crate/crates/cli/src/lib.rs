//! Library side of the `sdn` command-line tool.

pub mod commands;
pub mod config;
pub mod oracle;

use anyhow::Result;

use config::{Cli, RunConfig};

/// Resolves settings from the process environment and runs the subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(&cli, &|k| std::env::var(k).ok())?;
    sdn_core::par::with_jobs(cfg.jobs, || commands::dispatch(&cli.command, &cfg))
}

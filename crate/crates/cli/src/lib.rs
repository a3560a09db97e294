//! Scenario runner for `martinv-core`: JSON config in, CSV/JSON artifacts and verdicts out.

pub mod accept;
pub mod commands;
pub mod config;
pub mod output;

use std::path::Path;

use clap::ValueEnum;

use config::Config;
use output::{CliError, Result, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Invert,
    Consistency,
    Couple,
    Surface,
    Digital,
    Accept,
}

/// Reads a config; a missing file is an error, an empty object gives the defaults.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Runs one scenario and returns its manifest.
pub fn run(command: Command, cfg: &Config, out: &Path) -> Result<RunManifest> {
    match command {
        Command::Invert => commands::invert(cfg, out),
        Command::Consistency => commands::consistency(cfg, out),
        Command::Couple => commands::couple(cfg, out),
        Command::Surface => commands::surface(cfg, out),
        Command::Digital => commands::digital(cfg, out),
        Command::Accept => accept::accept(cfg, out).map(|(m, _)| m),
    }
}

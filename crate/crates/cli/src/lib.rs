//! Command-line driver: dataset generation, training, evaluation,
//! property verification, and the inference scaling probe.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage, 3 numeric failure, 4 property
//! failure.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use args::{Cli, Command};
use error::CliError;

/// Resolves the configuration and runs the command, returning the text to
/// print on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.command.resolve()?;
    let out = &cli.command.common().out;
    match &cli.command {
        Command::Generate { .. } => commands::generate(&cfg, out),
        Command::Train { .. } => commands::train(&cfg, out),
        Command::Eval { .. } => commands::eval(&cfg, out),
        Command::Verify { .. } => commands::verify(&cfg, out),
        Command::Scale { .. } => commands::scale(&cfg, out),
    }
}

//! The `lqae` command-line tool: training, encoding, reconstruction, probing,
//! few-shot evaluation and ablation sweeps, each writing a run manifest.
//!
//! Exit codes: 0 on success, 2 for usage and config errors, 3 for failures
//! while running.

pub mod ablate;
pub mod args;
pub mod commands;
pub mod error;
pub mod eval;
pub mod manifest;

use std::ffi::OsString;

use clap::Parser;

pub use ablate::{cmd_ablate, AblationRecord, SweepSpec};
pub use args::{Cli, Command, Common};
pub use commands::{cmd_encode, cmd_fewshot, cmd_probe, cmd_reconstruct, cmd_train, resolve_config, TrainReport};
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;

/// Parses `argv` and runs the subcommand, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let c = &cli.common;
    let result = match &cli.command {
        Command::Train(a) => cmd_train(c, a).map(drop),
        Command::Encode(a) => cmd_encode(c, a).map(drop),
        Command::Reconstruct(a) => cmd_reconstruct(c, a).map(drop),
        Command::Probe(a) => cmd_probe(c, a).map(drop),
        Command::Fewshot(a) => cmd_fewshot(c, a).map(drop),
        Command::Ablate(a) => cmd_ablate(c, a).map(drop),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

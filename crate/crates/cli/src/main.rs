//! `loid`: generate corpora, build encoders, pretrain and merge adapters,
//! train and evaluate target models.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 3 on data or
//! artifact errors.

mod args;
mod commands;
mod manifest;

use clap::Parser;
use loid::LoidError;
use std::process::ExitCode;

fn exit_code(e: &LoidError) -> u8 {
    if e.is_config() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    let level = if cli.verbose { tracing::Level::INFO } else { tracing::Level::WARN };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

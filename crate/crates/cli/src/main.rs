//! `hdae`: simulation, gradient checks and identification from the shell.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;
use clap::error::ErrorKind;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let res = match &cli.command {
        Command::Simulate(a) => commands::run_simulate(a),
        Command::Gradcheck(a) => commands::run_gradcheck(a),
        Command::Identify(a) => commands::run_identify_cmd(a),
        Command::Compare(a) => commands::run_compare(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

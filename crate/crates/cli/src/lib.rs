//! `rlhd` command line and the campaign HTTP service.

pub mod commands;
pub mod service;

use std::ffi::OsString;

use clap::Parser;

use commands::Cli;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_EVALUATION: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    use rlhd_core::Error;
    match e.downcast_ref::<Error>() {
        Some(Error::Evaluation { .. } | Error::Protocol { .. } | Error::DegenerateModel) => EXIT_EVALUATION,
        Some(Error::Invariant(_)) => EXIT_INVARIANT,
        _ => EXIT_USAGE,
    }
}

/// Parse `args` and run the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

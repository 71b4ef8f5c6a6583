//! The `dfsp` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or invariant error,
//! 3 numerical failure (divergence, failed gradient check).

pub mod args;
pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::error::ErrorKind as ClapKind;
use clap::Parser;
use dfsp_core::{Error, ErrorKind};

use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data | ErrorKind::Io => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => a.run.resolve().and_then(commands::train_cmd),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
        Command::GenSynthetic(a) => commands::gen_cmd(a),
        Command::Gradcheck(a) => match commands::gradcheck_cmd(a) {
            Ok(r) if r.passed => Ok(()),
            Ok(r) => {
                let failing: Vec<&str> = r.failing_groups().map(|g| g.name.as_str()).collect();
                eprintln!("error: gradient check failed for {}", failing.join(", "));
                return EXIT_NUMERICAL;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

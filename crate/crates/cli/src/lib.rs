//! The `roadsurf` command-line pipeline.

pub mod commands;
pub mod config;
pub mod logging;
pub mod pipeline;

use std::ffi::OsString;

use clap::Parser;

pub use commands::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    logging::init();
    match commands::run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if e.downcast_ref::<commands::CheckFailed>().is_some() {
                eprintln!("check failed: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            EXIT_FAILURE
        }
    }
}

//! The `mood` command-line tool. [`run`] is the whole program; `main` only
//! forwards the process arguments and exit code.

mod args;
mod commands;
mod config;
mod outputs;
mod selfcheck;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;
use mood_core::MoodError;

pub use args::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "MOOD_THREADS";

/// Exit code for an error, by category.
pub fn exit_code(e: &MoodError) -> i32 {
    match e {
        MoodError::Config(_) | MoodError::Parameter(_) => EXIT_USAGE,
        MoodError::Numeric { .. } => EXIT_NUMERIC,
        MoodError::Io { .. }
        | MoodError::Format(_)
        | MoodError::Validation(_)
        | MoodError::Shape(_)
        | MoodError::Geometry(_)
        | MoodError::Data(_) => EXIT_DATA,
    }
}

/// Parses `argv` (including the program name), runs one subcommand and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "mood: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> mood_core::Result<()> {
    let threads = resolve_threads(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| MoodError::Config(format!("cannot start worker threads: {e}")))?;
    let cfg = config::CliConfig::load(cli.config.as_deref())?;
    pool.install(|| commands::dispatch(cli.command, &cfg))
}

fn resolve_threads(flag: Option<usize>) -> mood_core::Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| MoodError::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if n == Some(0) {
        return Err(MoodError::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

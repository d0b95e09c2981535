//! Command-line front end for the beamsel pipeline: configuration loading
//! and the `generate`, `train`, `eval`, `sweep` and `gradcheck` commands.

pub mod commands;
pub mod config;

use beamsel::Error;

pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Contract(_) | Error::Io { .. } => EXIT_DATA,
        Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

/// Sizes the global thread pool from `BEAMSEL_THREADS` when it is set.
pub fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("BEAMSEL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Error::Config(format!("BEAMSEL_THREADS must be a positive integer, got {value:?}")))?;
    if n == 0 {
        return Err(Error::Config("BEAMSEL_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

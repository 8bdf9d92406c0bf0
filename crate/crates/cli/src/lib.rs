//! Config-driven experiment harness around the `polarsynth` library:
//! surrogate training, design optimization, rendering, evaluation and PSF
//! export. The `polarsynth` binary is a thin argument parser over
//! [`commands`].

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod preview;

pub use error::{CliError, CliResult};

/// Worker cap from `POLARSYNTH_THREADS` (unset means the rayon default).
pub fn thread_cap(value: Option<&str>) -> CliResult<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("POLARSYNTH_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

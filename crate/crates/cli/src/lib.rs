//! Command-line front end of the DEER text spotter.

pub mod commands;
pub mod config;
pub mod error;
pub mod render;

pub use error::{CliError, CliResult, ConfigError};

/// Sizes the global thread pool; 1 unless `threads` says otherwise.
pub fn init_threads(threads: usize) -> CliResult<()> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

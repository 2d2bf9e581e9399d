//! Command-line surface of the `dgm` tool: field-file and PGM I/O, run
//! configuration and one function per subcommand.

pub mod commands;
pub mod config;
pub mod error;
pub mod fieldfile;
pub mod pgm;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use fieldfile::{DType, FieldData, FieldFile};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "DGM_THREADS";

/// Parses a `DGM_THREADS` value.
pub fn parse_threads(value: &str) -> CliResult<usize> {
    match value.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(CliError::Usage(format!("{THREADS_ENV} must be an integer >= 1, got {value:?}"))),
    }
}

/// Sizes the global rayon pool from `DGM_THREADS` when it is set.
pub fn init_threads() -> CliResult<()> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let n = parse_threads(&raw.to_string_lossy())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_counts() {
        assert_eq!(parse_threads("4").unwrap(), 4);
        assert_eq!(parse_threads(" 1 ").unwrap(), 1);
        for bad in ["0", "-1", "two", ""] {
            assert!(parse_threads(bad).is_err());
        }
    }
}

//! Experiment harness for blo-core: config-driven training runs, gradient
//! cross-checks, variance studies and thread-scaling benchmarks.

pub mod commands;
pub mod config;
pub mod error;
pub mod fixtures;

pub use config::{ExperimentConfig, ProblemConfig};
pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, EXIT_TOLERANCE};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BLO_THREADS";

/// Parses a `BLO_THREADS` value; `None` when unset.
pub fn parse_thread_cap(value: Option<&str>) -> CliResult<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(parse_thread_cap(None).unwrap(), None);
        assert_eq!(parse_thread_cap(Some("4")).unwrap(), Some(4));
        assert!(parse_thread_cap(Some("0")).is_err());
        assert!(parse_thread_cap(Some("many")).is_err());
    }
}

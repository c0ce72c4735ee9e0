use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_TOLERANCE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Core(#[from] blo_core::Error),

    #[error("io error at {path}: {message}")]
    Io { path: String, message: String },

    #[error("tolerance breach: {0}")]
    Tolerance(String),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_divergence() => EXIT_DIVERGENCE,
            CliError::Tolerance(_) => EXIT_TOLERANCE,
            _ => EXIT_CONFIG,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::Tolerance("x".into()).exit_code(), EXIT_TOLERANCE);
        assert_eq!(
            CliError::Core(blo_core::Error::divergence(3, 1.0, "x")).exit_code(),
            EXIT_DIVERGENCE
        );
        let neumann = blo_core::Error::NeumannDivergence {
            term: 2,
            growth: 1e7,
        };
        assert_eq!(CliError::Core(neumann).exit_code(), EXIT_DIVERGENCE);
        assert_eq!(
            CliError::Core(blo_core::Error::invalid("x")).exit_code(),
            EXIT_CONFIG
        );
    }
}

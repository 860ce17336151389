use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data failed validation. `row` is 1-based and counts the header.
    #[error("validation error{}: {message}", .row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Validation { row: Option<usize>, message: String },

    #[error("row {0} is a detected bug; its inclusion indicator is fixed at 1")]
    DetectedRow(usize),

    #[error("slice sampler failed for row {row}: {reason}")]
    SliceFailure { row: usize, reason: String },

    #[error("chain {chain} has a non-finite log posterior after {attempts} initialization attempts")]
    NonFiniteInit { chain: usize, attempts: usize },

    #[error("undefined variance for `{0}`: the quantity is constant within every chain")]
    UndefinedVariance(String),

    #[error("not enough draws: {0}")]
    InsufficientDraws(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn validation(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Validation {
            row,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Config(_) | Error::Domain(_) | Error::Toml(_)
        )
    }
}

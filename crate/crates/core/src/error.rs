//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameter or configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operands whose shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Index outside its valid range.
    #[error("index error: {0}")]
    Index(String),

    /// Caller broke an API contract (empty input, stale tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A metric is undefined for the given labels.
    #[error("metric error: {0}")]
    Metric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl Error {
    /// Prefixes the message with `ctx`, keeping the error kind.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{ctx}: {m}")),
            Error::Index(m) => Error::Index(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Metric(m) => Error::Metric(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

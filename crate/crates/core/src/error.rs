use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied malformed data (token out of vocab, length mismatch, missing field).
    #[error("input error: {0}")]
    Input(String),
    /// A configuration value is outside its valid domain.
    #[error("configuration error: {0}")]
    Config(String),
    /// A structural invariant was violated (e.g. a span mask that is not a partition).
    #[error("invariant violation: {0}")]
    Invariant(String),
    /// A value became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// The execution backend could not be reached or spoke garbage. Distinct from a
    /// query that ran and failed, which is reward 0.
    #[error("backend transport failure: {0}")]
    Transport(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

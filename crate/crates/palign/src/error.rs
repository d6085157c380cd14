//! Crate-wide error type; every fallible operation funnels into `Error`.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite intermediate or invalid numeric argument.
    #[error("numeric: {0}")]
    Numeric(String),
    /// Vector with (near-)zero norm where a direction is required.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    /// Invalid or out-of-range configuration.
    #[error("config: {0}")]
    Config(String),
    /// Difficulty calibration could not reach the requested target.
    #[error("calibration: {0}")]
    Calibration(String),
    /// Two restricted posteriors defined over different candidate sets.
    #[error("support mismatch: {0}")]
    Support(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

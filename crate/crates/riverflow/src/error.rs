//! Error categories shared across the crate.
//!
//! The categories map one-to-one onto CLI exit codes: configuration problems,
//! unreadable or inconsistent data, violated domain preconditions, corrupted
//! graph structure, and numerical failures during optimization.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (illegal architecture/adjacency pair, bad hyperparameter).
    #[error("config error: {0}")]
    Config(String),

    /// Unreadable, missing or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// An operation precondition was violated (unknown gauge id, shape mismatch, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The input data contradicts a structural guarantee it was supposed to satisfy.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A numerical computation produced NaN/Inf or otherwise failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}

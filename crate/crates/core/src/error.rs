//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Graph construction or validation failure.
    #[error("graph error: {0}")]
    Graph(String),

    /// Dataset or input data problem.
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted by the divergence guard.
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

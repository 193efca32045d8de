use thiserror::Error;

use crate::net::NeuronRef;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input: dimension mismatches, bad vectors, inconsistent shapes.
    #[error("input error: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("uncertified replacement of {neuron}: {detail}")]
    Uncertified { neuron: NeuronRef, detail: String },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the caller's data rather than by this library.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Invariant(_))
    }
}

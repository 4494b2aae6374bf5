use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("{module}: {msg}")]
    InvalidArgument { module: &'static str, msg: String },

    #[error("{module}: shape mismatch: {msg}")]
    Shape { module: &'static str, msg: String },

    #[error("{module}: non-finite value in {context}")]
    NonFinite { module: &'static str, context: String },

    /// Malformed binary input. `offset` is the byte position where decoding failed.
    #[error("{file}: {msg} (at offset {offset})")]
    Format {
        file: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("{module}: {msg}")]
    Linalg { module: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(module: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn non_finite(module: &'static str, context: impl Into<String>) -> Self {
        Error::NonFinite {
            module,
            context: context.into(),
        }
    }
}

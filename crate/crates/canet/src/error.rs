use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes. The message names
    /// the operation and the offending dimension.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Bad argument outside of shape problems (negative factor, unknown
    /// topology tag, label out of range, ...).
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// Configuration file problems: unknown key, bad value, missing section.
    #[error("config: {0}")]
    Config(String),

    /// Binary/text parse failure with the byte offset where it happened.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Loss became non-finite during training.
    #[error("training diverged at iteration {iter}: loss is not finite")]
    Diverged { iter: u64 },
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

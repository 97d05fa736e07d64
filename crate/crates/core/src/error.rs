//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("token sequence length {len} exceeds max-len {max_len}")]
    Truncation { len: usize, max_len: usize },
    #[error("scene generation failed after {attempts} attempts (seed {seed})")]
    Generation { seed: u64, attempts: usize },
    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Train(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

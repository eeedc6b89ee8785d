use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("generation index {index} out of range (buffer holds {len})")]
    Index { index: usize, len: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("cannot render a prompt from an empty buffer")]
    EmptyBuffer,
    #[error(transparent)]
    Parse(#[from] ParseFailure),
    #[error(transparent)]
    Backend(#[from] BackendFailure),
    #[error("config error: {0}")]
    Config(String),
    #[error("aggregation error: {0}")]
    Aggregate(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid { what, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A completion that could not be turned into a proposal.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable completion ({reason}): {raw_text:?}")]
pub struct ParseFailure {
    pub reason: String,
    pub raw_text: String,
}

impl ParseFailure {
    pub(crate) fn new(reason: impl Into<String>, raw_text: &str) -> Self {
        Self { reason: reason.into(), raw_text: raw_text.to_owned() }
    }
}

/// A backend call that produced no usable text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendFailure {
    #[error("request failed after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("request deadline of {millis} ms exceeded")]
    Timeout { millis: u128 },
    #[error("malformed service response: {0}")]
    Malformed(String),
    #[error("replay script exhausted")]
    ScriptExhausted,
    #[error("oracle could not read the prompt: {0}")]
    Unreadable(String),
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no relation assigned for old class {old} / new class {new}")]
    MissingPair { old: usize, new: usize },
    #[error("class id {0} appears more than once")]
    DuplicateClass(usize),
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("could not place phantom layout: {0}")]
    Layout(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask is not binary")]
    InvalidMask,
    #[error("step mismatch: {0}")]
    StepMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("insufficient data: need at least {need} pairs, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PlftError>;

#[derive(Debug, Error)]
pub enum PlftError {
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<PlftError>,
    },

    #[error("malformed line: {0}")]
    Malformed(String),

    #[error("duplicate entry ({i}, {j}, {k})")]
    DuplicateKey { i: usize, j: usize, k: usize },

    #[error("{axis} index {index} out of range (size {size})")]
    IndexOutOfRange {
        axis: &'static str,
        index: usize,
        size: usize,
    },

    #[error("entry ({i}, {j}, {k}) is already present")]
    KeyCollision { i: usize, j: usize, k: usize },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("split ratios must be non-negative and sum to 1 (got {0:?})")]
    InvalidRatios([f64; 3]),

    #[error("need at least {needed} entries, found {found}")]
    TooFewEntries { needed: usize, found: usize },

    #[error("tensor has no entries")]
    EmptyTensor,

    #[error("rank must be at least 1")]
    InvalidRank,

    #[error("dense reconstruction of {cells} cells exceeds cap {cap}")]
    CapExceeded { cells: usize, cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("holdout set is empty")]
    EmptyHoldout,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed factor file: {0}")]
    FactorFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PlftError {
    pub(crate) fn at_line(self, line: usize) -> Self {
        PlftError::AtLine {
            line,
            source: Box::new(self),
        }
    }

    /// The underlying error, with any line-number wrapper removed.
    pub fn root(&self) -> &PlftError {
        match self {
            PlftError::AtLine { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PlftError::Io {
            path: path.into(),
            source,
        }
    }
}

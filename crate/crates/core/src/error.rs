use std::io;

use thiserror::Error;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intensity range: lo ({lo}) must be below hi ({hi})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("invalid resampling factor {0}: must be at least 1")]
    InvalidFactor(usize),

    #[error("buffer of length {len} does not match dims {dims:?} ({expected} voxels)")]
    BufferLength {
        len: usize,
        dims: [usize; 3],
        expected: usize,
    },

    #[error("label maps must be binary; found value {0}")]
    NonBinaryLabel(u8),

    #[error("box {boxed} lies outside dims {dims:?}")]
    OutOfBounds { boxed: String, dims: [usize; 3] },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("activation cache is stale: built for parameter version {cache}, parameters are at {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("non-finite loss at epoch {epoch}, case {case}: {value}")]
    NonFiniteLoss { epoch: usize, case: usize, value: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: expected {expected} more bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(left: impl Into<Vec<usize>>, right: impl Into<Vec<usize>>) -> Self {
        Error::DimMismatch {
            left: left.into(),
            right: right.into(),
        }
    }
}

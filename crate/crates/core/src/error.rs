use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the glyph pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("unsupported bit depth {0} (only 8-bit PNG is accepted)")]
    UnsupportedDepth(u8),
    #[error("expected {expected} channel(s), got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("threshold {0} is outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("invalid size {width}x{height}")]
    InvalidSize { width: usize, height: usize },
    #[error("cannot encode a {0}-channel image as PNG")]
    UnsupportedChannels(usize),
    #[error("pixel ({x}, {y}) is outside a {width}x{height} grid")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate batch: {0} values per channel, batch statistics need at least 2")]
    DegenerateBatch(usize),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("dataset is empty: {0}")]
    DataEmpty(String),
    #[error("font directory {0} contains no images")]
    EmptyFont(PathBuf),
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::NumericalFailure(_) | Error::DegenerateBatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

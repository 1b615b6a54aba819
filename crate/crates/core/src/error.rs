//! One error type shared by the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    /// Malformed serialized data (bank files, checkpoints, config files).
    #[error("{0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("images must have 1 or 3 channels, got {got}")]
    BadChannelCount { got: usize },

    #[error("input is empty")]
    EmptyInput,

    #[error("patch size {size} exceeds image extent {height}x{width}")]
    PatchTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("stride must be at least 1")]
    ZeroStride,

    #[error("scale must be 2, 3, or 4, got {0}")]
    BadScale(usize),

    #[error("dimensions {height}x{width} are not divisible by scale {scale}")]
    NonDivisibleDims {
        height: usize,
        width: usize,
        scale: usize,
    },

    #[error("image {height}x{width} is too small, need at least {min} on each side")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("sample set is empty")]
    EmptySampleSet,

    #[error("requested {requested} samples but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },

    #[error(
        "dense circulant for a {height}x{width} plane with k={k} would exceed the size guard"
    )]
    CirculantTooLarge { height: usize, width: usize, k: usize },

    #[error("at most k*k-1 = {max} filters can be designed, requested {requested}")]
    TooManyFilters { requested: usize, max: usize },

    #[error("feasible subspace is exhausted: {0}")]
    SubspaceExhausted(String),

    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("dataset has no usable images: {0}")]
    EmptyDataset(String),

    #[error("filter bank has {bank} channels but the images have {image}")]
    BankMismatch { bank: usize, image: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

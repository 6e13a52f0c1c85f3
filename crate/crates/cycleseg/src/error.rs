//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A region bank or co-segmentation instance was built from zero sources.
    #[error("empty group: at least one source image is required")]
    EmptyGroup,

    /// Group operations need at least two branches.
    #[error("group too small: k = {k}, need k >= 2")]
    GroupTooSmall { k: usize },

    /// Ground-truth labels outside the supported {0, 1} set.
    #[error("label error: {0}")]
    Label(String),

    /// Bad run configuration (unknown key, out-of-range value, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Exhaustive tuple enumeration would exceed the configured cap.
    #[error("combinatorial blowup: {tuples} tuples exceeds cap {cap}")]
    CombinatorialBlowup { tuples: u128, cap: u64 },

    /// An image received no predictions during group-segmentation fusion.
    #[error("missing prediction for image {image}")]
    MissingPrediction { image: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (checkpoint, PPM/PGM header, config file).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument is outside its documented range.
    #[error("range error: {0}")]
    Range(String),

    /// An operation produced or received a NaN/Inf.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A gradient was requested for a value the tape never saw.
    #[error("missing gradient: {0}")]
    MissingGrad(String),

    /// Bad run configuration (unknown layer id, mismatched resolutions, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An attention cache has no entry for a scheduled (timestep, layer).
    #[error("cache miss: {0}")]
    CacheMiss(String),

    /// A histogram argument was not normalized.
    #[error("normalization error: {0}")]
    Normalization(String),

    /// Checkpoint container is malformed or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training loss blew up.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors surfaced by model construction, tensor ops, matching, and losses.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor ranks, axis lengths, or element counts do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is structurally invalid (e.g. dim not divisible by heads).
    #[error("invalid config: {0}")]
    Config(String),

    /// An input value violates a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A size limit was exceeded (e.g. brute-force matcher beyond its bound).
    #[error("size limit: {0}")]
    Size(String),

    /// A cross-argument contract was violated (e.g. task fields missing).
    #[error("contract violation: {0}")]
    Contract(String),

    /// OKS requested with zero visible keypoints.
    #[error("OKS undefined: no visible keypoints")]
    UndefinedOks,

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

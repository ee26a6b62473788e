use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("prior does not support {0}")]
    Unsupported(String),

    #[error("timestep {0} is not present in the reference basis")]
    MissingTimestep(usize),

    #[error("parameter gradient requested without a recorded forward pass")]
    NoForwardPass,

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("training diverged at step {step} (t = {t}): {detail}")]
    Diverged { step: usize, t: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

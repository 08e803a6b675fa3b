use thiserror::Error;

/// Library-wide error type. CLI exit codes map from the variants:
/// data/format problems are distinguishable from training failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in tensor / model plumbing.
    #[error("shape error: {0}")]
    Shape(String),

    /// A documented API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad or unreadable data file (corpus, trace, checkpoint).
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged (non-finite loss) at the given optimizer step.
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

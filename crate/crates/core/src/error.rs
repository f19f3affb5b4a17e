use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum PcsrError {
    /// Invalid dimensions, hyperparameters or arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input that has no meaningful result (zero-norm vector, constant sample).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Non-finite values or a failed numerical routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A broken internal contract, such as out-of-range labels or misaligned masks.
    #[error("logic error: {0}")]
    Logic(String),

    /// Training cannot proceed (e.g. no clean pairs left to anchor on).
    #[error("training error: {0}")]
    Training(String),

    /// Malformed dataset or checkpoint file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PcsrError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PcsrError::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        PcsrError::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PcsrError>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("interaction log is empty")]
    EmptyLog,

    #[error("training set is empty; cannot build co-occurrence graph")]
    EmptyGraph,

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error(
        "non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed:#018x}): {detail}"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        batch_seed: u64,
        detail: String,
    },

    #[error("invalid format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}

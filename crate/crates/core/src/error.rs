use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("batch norm needs a batch of at least 2 in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("zero-norm row {row} passed to {op}")]
    ZeroNorm { op: &'static str, row: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is not recorded on the active tape")]
    NotOnTape,

    #[error("NaN encountered in {0}")]
    Nan(&'static str),

    #[error("epoch {epoch} out of schedule range (total {total})")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

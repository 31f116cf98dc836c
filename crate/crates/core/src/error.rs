//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid scanpath: {0}")]
    InvalidScanpath(String),

    #[error("invalid augmentation parameters: {0}")]
    InvalidAugmentParams(String),

    #[error("csv schema error: missing column `{0}`")]
    SchemaError(String),

    #[error("csv row error at line {line}: {message}")]
    RowError { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    TrainingDiverged { epoch: usize, message: String },

    #[error("class {0} has no training samples")]
    MissingClass(usize),

    #[error("invalid q-values: {0}")]
    InvalidQValues(String),

    #[error("invalid reward spec: {0}")]
    InvalidRewardSpec(String),

    #[error("replay capacity {capacity} below the {required} entries of a single image sweep")]
    CapacityError { capacity: usize, required: usize },

    #[error("replay memory is empty")]
    EmptyMemory,

    #[error("entry originates from outside the training set")]
    ProvenanceError,

    #[error("need at least {needed} records, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("laplace scale must be positive, got {0}")]
    InvalidScale(f64),

    #[error("no epsilon in the sweep keeps subject accuracy within the chance band")]
    NoFeasibleEpsilon,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

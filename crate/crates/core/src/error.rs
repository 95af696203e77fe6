use thiserror::Error;

/// Errors raised anywhere in the testing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid feature set: {0}")]
    InvalidFeatureSet(String),

    #[error("loss shape error: {0}")]
    LossShape(String),

    #[error("prediction shape error: expected {expected} columns, got {got}")]
    PredictShape { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("sample too small: {0}")]
    SampleTooSmall(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("degenerate variance: all loss differences are identical (sd = 0)")]
    DegenerateVariance,

    #[error("at least two p-values are required, got {0}")]
    NeedMultiplePValues(usize),

    #[error("p-value {value} at position {index} is outside [0, 1]")]
    InvalidPValue { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no perturbation for sample `{0}`")]
    MissingDelta(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("quantization breaks the perturbation bound: {0}")]
    QuantizationBreaksBound(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),

    #[error("unknown architecture `{0}`")]
    ArchUnknown(String),

    #[error("dataset has no labels but the operation requires them")]
    MissingLabels,

    #[error("discriminator parameters changed mid-run (expected hash {expected}, got {actual})")]
    DiscriminatorNotFrozen { expected: String, actual: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("perturbation sets cover different samples: {0}")]
    SampleSetMismatch(String),

    #[error("perturbation budgets differ: {0}")]
    BudgetMismatch(String),

    #[error("perturbation budget violated: {0}")]
    BudgetViolation(String),

    #[error("generator checkpoints disagree: {0}")]
    CheckpointMismatch(String),

    #[error("dataset manifest invalid: {0}")]
    DatasetManifestInvalid(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("report incomplete: {0}")]
    IncompleteReport(String),

    #[error("stage `{stage}` failed: {source}")]
    StageFailure {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cache corrupted at {path}: {reason}")]
    CacheCorruption { path: String, reason: String },

    #[error("dataset adapter failed: {0}")]
    AdapterFailure(String),

    #[error("dataset `{0}` not available: {1}")]
    DatasetUnavailable(String, String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::StageFailure {
            stage: stage.into(),
            source: Box::new(source),
        }
    }

    /// CLI exit code: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::ArchUnknown(_) => 2,
            _ => 3,
        }
    }
}

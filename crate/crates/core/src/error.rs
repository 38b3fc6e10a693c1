use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // ingest
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("scan path listed more than once: {0}")]
    DuplicateScanPath(PathBuf),
    #[error("unknown clinical dementia rating {0}")]
    UnknownRating(f64),
    #[error("unsupported volume format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid class proportions: {0}")]
    InvalidProportions(String),

    // preprocess
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite values in {0}")]
    NonFiniteInput(String),

    // splits
    #[error("too few subjects: {0}")]
    TooFewSubjects(String),
    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),
    #[error("empty pool")]
    EmptyPool,
    #[error("ratio {0} is outside (0, 1)")]
    InvalidRatio(f64),

    // model zoo
    #[error("pretrained weights unavailable for {variant}: {reason}")]
    WeightsUnavailable { variant: String, reason: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    // training
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("class {0} has no training examples")]
    EmptyClass(usize),
    #[error("no training data")]
    NoTrainingData,
    #[error("no validation data")]
    NoValidationData,
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("leakage: subject {subject_id} read for {purpose} but it belongs to the {held_out} set")]
    Leakage {
        subject_id: String,
        purpose: String,
        held_out: String,
    },
    #[error("no patches for subject {0}")]
    UnknownSubject(String),

    // ensemble
    #[error("records do not share provenance: {0}")]
    MixedProvenance(String),
    #[error("expected {expected} records, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("no votes")]
    EmptyVotes,
    #[error("votes span several subjects: {0} and {1}")]
    MixedSubjects(String, String),

    // evaluation
    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor engine, data pipeline, training loop and harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must conform do not.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A layer, model or training option was configured outside its contract.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Batch statistics cannot be computed on a batch of one.
    #[error("degenerate batch: batch normalisation needs batch >= 2 in train mode, got {0}")]
    DegenerateBatch(usize),

    /// The tape was used outside its record-once / replay-once contract.
    #[error("tape error: {0}")]
    Tape(String),

    /// A text dataset file failed to parse; row numbers are 1-based.
    #[error("{path}:{row}: {message}")]
    DataFormat {
        path: String,
        row: usize,
        message: String,
    },

    /// Feature and label files disagree on the number of rows.
    #[error("row count mismatch: {features_path} has {features_rows} rows, {labels_path} has {labels_rows}")]
    RowCountMismatch {
        features_path: String,
        features_rows: usize,
        labels_path: String,
        labels_rows: usize,
    },

    /// A stratified split cannot give every partition a sample of some class.
    #[error("stratification error: class '{class}' has {count} samples, fewer than the {partitions} requested partitions")]
    Stratification {
        class: String,
        count: usize,
        partitions: usize,
    },

    /// A metric is undefined on its input (typically zero evaluated samples).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A label or prediction fell outside [0, K).
    #[error("class index out of range at position {index}: {value} >= {classes}")]
    ClassOutOfRange {
        index: usize,
        value: usize,
        classes: usize,
    },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    /// A named preset or experiment study does not exist.
    #[error("unknown name '{name}'; known: {known}")]
    UnknownName { name: String, known: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

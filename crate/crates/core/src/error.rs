use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes; the CLI maps each to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Parse,
    Io,
    Config,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid operator id {0} (expected 0..=15)")]
    InvalidOperator(usize),
    #[error("value {value} outside the unit interval for {what}")]
    Domain { what: &'static str, value: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} out of range")]
    Range(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("parse error at byte offset {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported model version {found} (this build reads version {expected})")]
    Version { found: u64, expected: u64 },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: unrecognised class label {token:?}")]
    Label { line: usize, token: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sequence {index} has length {len}; at least 4 values are required")]
    InsufficientLength { index: usize, len: usize },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    Cell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("preprocessing removed every feature column")]
    EmptyFeatures,
    #[error("cannot stratify: class {class} has {count} samples but {folds} folds were requested")]
    Stratification {
        class: usize,
        count: usize,
        folds: usize,
    },
    #[error("training set of {0} samples is too small for cross-validation (need at least 4)")]
    TooSmall(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. }
            | Error::Version { .. }
            | Error::Format { .. }
            | Error::Label { .. }
            | Error::EmptyDataset
            | Error::Schema(_)
            | Error::Cell { .. }
            | Error::InsufficientLength { .. } => ErrorClass::Parse,
            Error::Csv(e) if !matches!(e.kind(), csv::ErrorKind::Io(_)) => ErrorClass::Parse,
            Error::Io(_) | Error::Csv(_) => ErrorClass::Io,
            Error::Config(_) | Error::InvalidTemperature(_) => ErrorClass::Config,
            _ => ErrorClass::Internal,
        }
    }
}

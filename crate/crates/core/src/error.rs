use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error("row {row}, column {column:?}: non-numeric value {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: outcome missing on selected row")]
    MissingOutcome { row: usize },

    #[error("row {row}: treatment level out of range: {value} (declared levels 0..{levels})")]
    TreatmentOutOfRange {
        row: usize,
        value: i64,
        levels: usize,
    },

    #[error("treatment level {0} does not occur in the data")]
    AbsentLevel(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("fold {fold}, level {level}: empty training cell ({cell})")]
    EmptyCell {
        fold: usize,
        level: usize,
        cell: &'static str,
    },

    #[error("missing data channel: {0}")]
    MissingChannel(&'static str),

    #[error("no observations left after trimming")]
    AllTrimmed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

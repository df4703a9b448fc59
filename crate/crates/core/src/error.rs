use thiserror::Error;

/// Errors raised by the library. CLI exit codes are derived from these.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("row {row}, column {col}: malformed numeric cell {cell:?}")]
    MalformedCell {
        row: usize,
        col: usize,
        cell: String,
    },

    #[error("row {row}: expected {expected} count cells, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column {col}: negative count {value}")]
    NegativeCount { row: usize, col: usize, value: i64 },

    #[error("row {row}, column {col}: count {value} exceeds 2^31-1")]
    CountOverflow { row: usize, col: usize, value: u64 },

    #[error("covariate values must be strictly increasing (column {col})")]
    NonIncreasingCovariate { col: usize },

    #[error("covariate value at column {col} is not finite")]
    NonFiniteCovariate { col: usize },

    #[error("covariate vector needs at least 2 values, got {0}")]
    CovariateTooShort(usize),

    #[error("dataset has no count rows")]
    NoRows,

    #[error("test has zero total count and was skipped")]
    EmptyRow,

    #[error("no rows with positive total count")]
    NoUsableRows,

    #[error("count vector has {found} cells but covariate has {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid mixture parameters: {0}")]
    InvalidMixture(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed tabular input. Row and column are 1-based positions in the file.
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("input contains no data rows")]
    EmptyInput,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    /// A class scatter term stayed non-positive after the two-pass recomputation.
    #[error("numerical degeneracy in column {column}, class {class}")]
    Degenerate { column: usize, class: usize },

    #[error("mixture component {component} is empty")]
    EmptyComponent { component: usize },

    #[error("observation {row} has zero density under every component")]
    ZeroDensity { row: usize },

    #[error("EM failed on all {starts} initializations")]
    FitFailed { starts: usize },

    #[error("model enumeration of {count} models exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },
}

impl Error {
    /// True for failures of the numerical procedures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Degenerate { .. }
                | Error::EmptyComponent { .. }
                | Error::ZeroDensity { .. }
                | Error::FitFailed { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LataError>;

/// Failures from the matrix/labels/bundle file formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("bad magic {found:?}, expected \"LATA-MAT\"")]
    BadMagic { found: String },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported {field} {value:?}")]
    Unsupported { field: &'static str, value: String },

    #[error("matrix has zero rows or columns ({rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("labels file line {line}: {reason}")]
    Labels { line: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum LataError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numerical failure at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LataError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        LataError::DimensionMismatch {
            context,
            expected,
            got,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            LataError::Config(_) => 2,
            LataError::Numerical { .. } => 4,
            LataError::InvalidInput(_)
            | LataError::DimensionMismatch { .. }
            | LataError::Data(_)
            | LataError::Format(_)
            | LataError::Io { .. } => 3,
        }
    }
}

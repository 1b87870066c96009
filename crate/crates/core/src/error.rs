use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration.
    Usage,
    /// Unreadable, malformed or inconsistent input data.
    Data,
    /// Eigen-solve failure, constraint violation or training divergence.
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: duplicate sample id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: label {label} is outside {{-1, +1}}")]
    LabelDomain {
        path: PathBuf,
        line: usize,
        label: i64,
    },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("grid {rows}x{cols} does not evenly divide a {height}x{width} image")]
    IndivisibleGrid {
        rows: usize,
        cols: usize,
        height: usize,
        width: usize,
    },
    #[error("bad binary artifact {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("eigen-solve failed: {0}")]
    EigenSolve(String),
    #[error(
        "constraint residual {residual:.3e} exceeds {tolerance:.0e} at direction {step} ({constraint})"
    )]
    ConstraintViolation {
        step: usize,
        constraint: &'static str,
        residual: f64,
        tolerance: f64,
    },
    #[error("training diverged (non-finite loss) at epoch {epoch}, sample {sample_id:?}")]
    Divergence { epoch: usize, sample_id: String },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::EigenSolve(_)
            | Error::ConstraintViolation { .. }
            | Error::Divergence { .. }
            | Error::NonFiniteLoss(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(
        what: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

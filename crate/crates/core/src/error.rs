use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("affine transform is not invertible (det = {det:e})")]
    SingularAffine { det: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unbound graph input: node {0}")]
    UnboundInput(usize),

    #[error("backward requires a scalar output, node {node} has {len} elements")]
    NonScalarOutput { node: usize, len: usize },

    #[error("field inversion did not converge: max residual {max_residual:.4} voxels after {iterations} iterations")]
    InversionFailed { max_residual: f64, iterations: usize },

    #[error("loss variant {variant} requires the `{term}` term")]
    MissingLossTerm { variant: String, term: &'static str },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: &'static str },

    #[error("unsupported version {found} in {what}")]
    UnsupportedVersion { what: &'static str, found: u32 },

    #[error("unsupported data type code {0}")]
    UnsupportedDtype(i32),

    #[error("unsupported rank {0} (only 3-D volumes are supported)")]
    UnsupportedRank(i64),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::MissingLossTerm { .. } => ErrorKind::Usage,
            Error::NonFinite { .. } | Error::InversionFailed { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

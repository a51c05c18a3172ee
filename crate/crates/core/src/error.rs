use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("gradient check failed: worst relative error {worst:e} exceeds {tolerance:e}")]
    GradientMismatch { worst: f64, tolerance: f64 },

    #[error("loss node must be scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("malformed tape: node {node} consumes later node {input}")]
    MalformedTape { node: usize, input: usize },
    #[error("custom backward contract violated: {0}")]
    ShapeContract(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("file length {len} is not a multiple of the record size {record}")]
    RecordSize { len: usize, record: usize },

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype {0:#04x}")]
    UnsupportedDtype(u8),
    #[error("truncated container: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("container has {0} trailing bytes")]
    TrailingBytes(usize),

    #[error("config error: {0}")]
    Config(String),
    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("no metrics found under {0}")]
    MissingMetrics(PathBuf),
    #[error("policy grid has {0} candidates (bound is 10000)")]
    OversizedGrid(usize),
    #[error("policy grid is empty")]
    EmptyGrid,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArch(_) | Error::Json(_) => ErrorKind::Config,
            Error::NonFinite(_) | Error::GradientMismatch { .. } => ErrorKind::Numeric,
            Error::EmptyDataset
            | Error::InvalidDataset(_)
            | Error::RecordSize { .. }
            | Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::UnsupportedDtype(_)
            | Error::Truncated { .. }
            | Error::TrailingBytes(_)
            | Error::MissingCheckpoint(_)
            | Error::MissingMetrics(_)
            | Error::Io { .. }
            | Error::Csv(_) => ErrorKind::Data,
            _ => ErrorKind::Internal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Internal,
}

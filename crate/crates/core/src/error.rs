use std::path::PathBuf;

/// Errors raised anywhere in the reasoning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {left:?} vs {right:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} does not hold {len} values")]
    InvalidTensor { shape: Vec<usize>, len: usize },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("axis {axis} out of range for rank {rank} at node {node}")]
    InvalidAxis { node: usize, axis: usize, rank: usize },

    #[error("truth value {0} outside [0, 1]")]
    OutOfRange(f64),

    #[error("concept index {index} out of range for {size} concepts")]
    ConceptIndex { index: usize, size: usize },

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("both classes must be present to compute AUC")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("planted rules for classes {0} and {1} are not mutually exclusive")]
    OverlappingRules(usize, usize),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{actual} bytes after a {expected}-byte tensor")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("tensor dims {0:?} overflow")]
    DimOverflow(Vec<u32>),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True when the failure stems from caller input rather than an internal fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

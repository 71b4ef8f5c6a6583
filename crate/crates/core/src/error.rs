use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("row {row} has norm below the normalization threshold")]
    ZeroNorm { row: usize },

    #[error("{kind} index {index} out of range (len {len})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    #[error("group {0} is empty")]
    EmptyGroup(usize),

    #[error("pair ({0}, {1}) is listed as both seen and unseen")]
    PairOverlap(usize, usize),

    #[error("duplicate pair ({0}, {1})")]
    DuplicatePair(usize, usize),

    #[error("{kind} `{name}` does not occur in any seen pair")]
    UncoveredPrimitive { kind: &'static str, name: String },

    #[error("invalid composition space: {0}")]
    InvalidSpace(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("manifest invariant violated: {0}")]
    Manifest(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("evaluation needs both seen and unseen test samples: {0}")]
    MissingSplit(&'static str),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Shape { .. }
            | Error::NonFinite(_)
            | Error::ZeroNorm { .. }
            | Error::Divergence { .. } => ErrorKind::Numerical,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }
}

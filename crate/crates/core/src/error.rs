use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("degenerate row {row}: L2 norm {norm:e} is below the normalization threshold")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown subject `{0}`")]
    UnknownSubject(String),

    #[error("modality mismatch: {0}")]
    Modality(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad magic: expected `NALN`, found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("unknown dtype tag {0}")]
    UnknownDType(u32),

    #[error("truncated payload: header declares {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),

    #[error("invalid dataset manifest ({} problems):\n  {}", .0.len(), .0.join("\n  "))]
    InvalidManifest(Vec<String>),

    #[error("checkpoint does not match architecture: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error comes from malformed input or configuration rather
    /// than from a numeric failure or the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::DegenerateRow { .. } | Error::Io { .. } | Error::Csv(_)
        )
    }
}

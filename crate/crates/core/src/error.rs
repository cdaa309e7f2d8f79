use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation matrix is not orthonormal (column norm deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
    #[error("degenerate 6D rotation: columns are zero or parallel")]
    DegenerateRotation,
    #[error("degenerate avatar frame: hip axis has no ground-plane extent")]
    DegenerateFrame,
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("BVH parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("file truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error("engine fault: {0}")]
    EngineFault(String),
    #[error("invalid configuration: {0}")]
    Config(String),
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

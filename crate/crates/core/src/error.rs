use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A noisy token is neither the clean token nor the mask.
    #[error("inconsistent pair: x_t = {xt} cannot be reached from x_0 = {x0}")]
    Inconsistent { x0: usize, xt: usize },

    #[error("singularity: {0}")]
    Singular(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ingestion error at byte {offset}: {reason}")]
    Ingest { offset: usize, reason: String },

    #[error("config error (line {line}): {reason}")]
    Config { line: usize, reason: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed metadata: {0}")]
    Metadata(String),
}

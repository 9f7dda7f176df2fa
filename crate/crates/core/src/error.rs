use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("degenerate intensity range")]
    DegenerateIntensity,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nifti: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("nifti: unsupported datatype {0}")]
    UnsupportedDatatype(i16),

    #[error("nifti: truncated payload (expected {expected} bytes, found {found})")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("nifti: malformed header: {0}")]
    MalformedHeader(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dims(left: [usize; 3], right: [usize; 3]) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::DimsMismatch { left, right })
    }
}

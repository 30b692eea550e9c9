use std::path::PathBuf;

use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    DimMismatch {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    Invalid(String),

    #[error("not a NIfTI-1 file ({0}): magic bytes missing")]
    NiftiMagic(PathBuf),

    #[error("unsupported NIfTI datatype code {0}")]
    NiftiDatatype(i16),

    #[error("invalid NIfTI header: {0}")]
    NiftiHeader(String),

    #[error("checkpoint entry {name}: shape mismatch (checkpoint {found:?}, expected {expected:?})")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("bad checkpoint file: {0}")]
    CheckpointFormat(String),

    #[error("empty ROI mask: metric undefined")]
    EmptyRoi,

    #[error("ASD undefined: {0} mask is empty")]
    EmptyMask(&'static str),

    #[error("optimizer state not initialized for entry {0}")]
    UninitializedState(String),

    #[error("training diverged at step {0} (non-finite loss)")]
    Diverged(u64),

    #[error("missing segmentation labels for this sample")]
    MissingLabels,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

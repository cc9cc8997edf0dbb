use std::path::PathBuf;

/// Errors produced by dictionary construction, spatial operators, solvers,
/// and the array file format.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid axis: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("mask contains no voxels")]
    EmptyMask,

    #[error("dictionary is identically zero; no valid truncation rank")]
    ZeroDictionary,

    #[error("reference image is identically zero")]
    ZeroReference,

    #[error("patch is not contained in the mask: {0}")]
    PatchOutsideMask(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions {0:?}: every dimension must be at least 1")]
    InvalidDimensions([usize; 3]),

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("size mismatch in {}: header expects {expected} values, payload holds {actual}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("unsupported element type `{0}`")]
    UnsupportedDtype(String),

    #[error("invalid header in {}: {reason}", path.display())]
    InvalidHeader { path: PathBuf, reason: String },

    #[error("invalid label value {value} at voxel {index}")]
    InvalidLabel { index: usize, value: f32 },

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("invalid channel set: {0}")]
    InvalidChannels(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("infeasible lesion placement after {0} attempts")]
    InfeasiblePlacement(usize),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

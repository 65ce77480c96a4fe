use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera near plane (z = {z})")]
    BehindCamera { z: f64 },

    #[error("value {value} outside the allowed range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("point cloud is empty")]
    EmptyPointCloud,

    #[error("backward pass called without retained forward state")]
    MissingForwardState,

    #[error("image of {width}x{height} is smaller than the {window}x{window} window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported camera model `{0}`")]
    UnsupportedCameraModel(String),

    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("period ids are not contiguous from 0: missing {missing}")]
    NonContiguousPeriods { missing: usize },

    #[error("period manifest names unknown image `{0}`")]
    UnknownImage(String),

    #[error("invalid synthetic scene: {0}")]
    SpecInvalid(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checkpoint is corrupt: {0}")]
    CorruptChecksum(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}

use std::path::PathBuf;

/// Errors produced anywhere in the change-detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-positive backscatter {value} at pixel ({row}, {col})")]
    NonPositive { row: usize, col: usize, value: f64 },

    #[error("non-finite value in {what} at pixel ({row}, {col})")]
    NonFinite {
        what: String,
        row: usize,
        col: usize,
    },

    #[error("value {value} outside [0, 1] in {what} at pixel ({row}, {col})")]
    OutOfRange {
        what: String,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("cosine difference undefined for a zero-norm latent mean")]
    ZeroNorm,

    #[error("{path}: expected {expected} band(s), found {found}")]
    ChannelCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Tiff(#[from] tiff::TiffError),

    #[error(transparent)]
    Png(#[from] png::EncodingError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

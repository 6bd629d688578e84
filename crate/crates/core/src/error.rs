use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("video too short: {frames} frames, at least 16 are needed for one clip")]
    TooShort { frames: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt feature file {path}: expected {expected} payload bytes, found {actual}")]
    CorruptFeatureFile { path: PathBuf, expected: usize, actual: usize },

    #[error("malformed feature manifest in {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("selection mask shrank at clip {clip}: an encoded clip was deselected")]
    MaskShrinkage { clip: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch in {what}: expected {expected:?}, got {actual:?}")]
    Shape { what: String, expected: (usize, usize), actual: (usize, usize) },

    #[error("index out of range in {what}: {index} >= {len}")]
    OutOfRange { what: String, index: usize, len: usize },

    #[error("training aborted at epoch {epoch}: loss term `{term}` is not finite")]
    TrainingDiverged { epoch: usize, term: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable code for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::TooShort { .. } => "too_short",
            Error::Config(_) => "config",
            Error::CorruptFeatureFile { .. } => "corrupt_feature_file",
            Error::BadManifest { .. } => "bad_manifest",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::MaskShrinkage { .. } => "mask_shrinkage",
            Error::NonFinite(_) => "non_finite",
            Error::Shape { .. } => "shape",
            Error::OutOfRange { .. } => "out_of_range",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::TrainingDiverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

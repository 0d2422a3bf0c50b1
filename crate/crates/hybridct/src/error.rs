//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dataset layout or option validation failed.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset scan found no usable images.
    #[error("no decodable images found under {0}")]
    EmptyDataset(PathBuf),

    /// A class is too small for the requested split fractions.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// Image decode or resize failure.
    #[error("failed to load image {path}: {reason}")]
    ImageLoad { path: PathBuf, reason: String },

    /// Structured-text parse failure with line context.
    #[error("parse error in {file} at line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// Array dimensions do not match what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Feature matrices fed to a combining operation disagree on record order.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Training could not start or diverged.
    #[error("training error: {0}")]
    Training(String),

    /// Pretrained weights were requested but are not present in the cache.
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),

    /// A persisted artifact failed its checksum or is structurally incomplete.
    #[error("artifact integrity error: {0}")]
    Integrity(String),

    /// A persisted artifact carries an unsupported format version.
    #[error("artifact version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    /// Expected file or directory is missing.
    #[error("not found: {0}")]
    NotFound(PathBuf),

    /// Invalid argument values outside the shape/alignment cases above.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A metric's denominator is empty (e.g. all-zero confusion matrix).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A pipeline stage failed; wraps the underlying error with stage context.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// I/O with path context.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

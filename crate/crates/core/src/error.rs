//! Error taxonomy shared by every module in the crate.
//!
//! Variants are grouped by what the caller can do about them: `Domain` and
//! `Shape` point at bad arguments, `Config` at an inconsistent configuration,
//! `Format` at unreadable artifacts on disk, `Numeric` at a computation that
//! left the representable range, and `UndefinedMetric` at correlation metrics
//! evaluated on degenerate inputs.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument value is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Configuration values are individually valid but mutually inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor, matrix, or parameter has the wrong shape for the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A graph violates its structural contract (self-loops, degrees, order).
    #[error("graph structure error: {0}")]
    Structure(String),

    /// A file on disk does not follow the expected serialized format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A computation produced a non-finite value; `stage` names the pipeline
    /// step that first observed it.
    #[error("numeric error at stage {stage}: {reason}")]
    Numeric { stage: String, reason: String },

    /// A correlation metric is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Attaches a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Builds a format error for `path`.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Builds a numeric error tagged with the pipeline stage that failed.
    pub fn numeric(stage: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Numeric { stage: stage.into(), reason: reason.into() }
    }
}

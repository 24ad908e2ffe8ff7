use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the geometry, loss, model, and pipeline layers.
#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes are inconsistent (grid dims, view counts, token counts).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A masked reduction was asked to divide by an empty mask.
    #[error("empty mask")]
    EmptyMask,

    /// An input is outside the operation's domain (depth guard, bad stride,
    /// out-of-vocabulary token, degenerate centroid, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Filesystem error, annotated with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A binary or text artifact does not match its format contract.
    #[error("format error: {0}")]
    Format(String),

    /// Bad configuration: unknown key, unparsable value, invalid combination.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training error: {0}")]
    Train(String),
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

use std::path::PathBuf;

/// Error type shared by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or layer received data whose dimensions do not fit the
    /// declared contract. The message names the offending dimension.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A spec (conv, block, network, config) violates one of its invariants.
    #[error("invalid spec: {0}")]
    Spec(String),

    /// Numeric failure at runtime: non-finite loss/gradient, overflow, an
    /// undefined mean over zero elements.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Dataset ingestion problem: unmatched pair, undecodable file,
    /// unmapped label id.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint container problem: bad magic, version mismatch,
    /// truncation, missing tensor.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
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

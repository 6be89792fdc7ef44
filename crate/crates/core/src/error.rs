//! Crate-wide error type.
//!
//! Panics are reserved for programmer errors (shape mismatches, unknown
//! parameter names); everything reachable from bad files, bad config, or
//! divergent numerics comes back as a [`CoreError`] so the CLI can map it
//! to a stable exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// A file failed structural validation. `offset` is the byte position
    /// at which the reader gave up, so truncation points are reportable.
    #[error("{what}: {detail} (at byte {offset})")]
    Corrupt { what: String, offset: u64, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no gradient for trainable parameter `{0}`")]
    MissingGrad(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

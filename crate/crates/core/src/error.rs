//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by model construction, data handling and the training
/// harness. Most shape problems are caught eagerly at module boundaries so
/// the tape never sees inconsistent operands.
#[derive(Debug, thiserror::Error)]
pub enum HgError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene has no valid agents")]
    EmptyScene,

    #[error("memory step out of order: expected t={expected}, got t={got}")]
    Sequencing { expected: usize, got: usize },

    #[error("bad dataset file {file}: {detail}")]
    Format { file: PathBuf, detail: String },

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("non-finite value in tensor '{tensor}'")]
    NonFinite { tensor: String },

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HgError>;

//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A context template is missing a required placeholder or repeats one.
    #[error("template error: {0}")]
    Template(String),

    /// An encoder backend could not produce a feature for the given text.
    #[error("encoding error for text {text:?}: {reason}")]
    Encoding { text: String, reason: String },

    /// Tensor or layer shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Training loss became non-finite; the last finite-loss parameters are attached.
    #[error("training diverged at epoch {epoch}, step {step}: {diagnostics}")]
    Diverged {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    /// An instruction set failed validation.
    #[error("instruction set rejected:\n{0}")]
    InvalidInstructionSet(String),

    /// Malformed or unsupported persisted file (checkpoint, snapshot, cache).
    #[error("file format error in {path}: {reason}")]
    FileFormat { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

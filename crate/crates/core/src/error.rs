//! Crate-wide error type.
//!
//! Errors are split by how the command-line front end should exit: config and
//! usage problems map to exit code 1, numerical failures and unmet
//! reproduction criteria map to exit code 2.

use thiserror::Error;

/// Errors produced by the training, evaluation, and persistence paths.
#[derive(Debug, Error)]
pub enum PwmError {
    /// A config key that no schema field recognizes.
    #[error("unknown config key: {key}")]
    UnknownConfigKey { key: String },

    /// A config value that failed to parse for its key.
    #[error("invalid value for config key {key}: {value}")]
    InvalidConfigValue { key: String, value: String },

    /// Malformed config syntax (missing `=`, bad override, ...).
    #[error("config syntax error: {0}")]
    ConfigSyntax(String),

    /// A task id that is not present in the registry.
    #[error("unknown task: {0}")]
    UnknownTask(String),

    /// Dimension or shape mismatch detected at module boundaries.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-finite value surfaced where training cannot continue.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed dataset or checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),

    /// A reproduction criterion that did not hold.
    #[error("criterion failed: {0}")]
    CriterionFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PwmError {
    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PwmError::UnknownConfigKey { .. }
            | PwmError::InvalidConfigValue { .. }
            | PwmError::ConfigSyntax(_)
            | PwmError::UnknownTask(_)
            | PwmError::Io(_)
            | PwmError::Json(_)
            | PwmError::Format(_)
            | PwmError::Shape(_) => 1,
            PwmError::Numerical(_) | PwmError::CriterionFailed(_) => 2,
        }
    }
}

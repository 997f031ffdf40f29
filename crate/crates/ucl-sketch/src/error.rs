//! Crate-wide error type. Config and input-format problems are kept apart
//! from runtime failures so the CLI can map them to distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad field values, unknown preset, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed external input (trace line, binary header, hex key, ...).
    /// `location` names the file/line/record where parsing failed.
    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    /// Dimension disagreement between operators, vectors or models.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Refusal to materialize something too large (dense matrices are for
    /// toy diagnostics only).
    #[error("size guard tripped: {0}")]
    SizeGuard(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    /// A metric that is undefined on the given inputs (e.g. empty truth).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    /// Exit code the CLI maps this error to: 2 for configuration problems,
    /// 3 for everything else at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

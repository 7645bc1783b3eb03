//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or length disagreement between operands.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Non-finite values, empty reductions, invalid probabilities.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Out-of-range lookup indices.
    #[error("index error: {0}")]
    Index(String),

    /// API misuse that violates a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data, reported with a 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Structurally valid input that breaks a semantic rule.
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad configuration values or incompatible settings.
    #[error("config error: {0}")]
    Config(String),

    /// Synthetic-data generation cannot proceed.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training diverged or produced unusable gradients.
    #[error("training error: {0}")]
    Training(String),

    /// Checkpoint bytes are corrupt or from an unsupported version.
    #[error("load error: {0}")]
    Load(String),

    /// Metric computation over an empty or degenerate set.
    #[error("metric error: {0}")]
    Metric(String),

    /// Ground-truth lookup failed during oracle evaluation.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

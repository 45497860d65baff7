//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`Result`]. Variants are
//! grouped by failure class so the CLI can map them onto exit codes without
//! string-matching: validation problems (dimensions, config, parsing,
//! loading, arguments) all exit 2, numerical blow-ups (divergence,
//! non-finite values) exit 3, and a failed gradient verification exits 4.

use thiserror::Error;

/// Library result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between tensors; names both shapes and the operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration (bad hyperparameter combination, empty split, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid argument to an operation (out-of-range index, zero k, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Byte-level parse failure (PNM, checkpoint); reports the byte offset.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Dataset/checkpoint loading failure (missing file, bad row, shape clash).
    #[error("load error: {0}")]
    Load(String),

    /// Inconsistent runtime state (e.g. optimizer moments out of sync).
    #[error("state error: {0}")]
    State(String),

    /// A value that must be finite was not; names the offending quantity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    /// Gradient verification failed; names the worst parameter.
    #[error("gradient check failed: {parameter} rel err {rel_err:.3e} (tol {tol:.1e})")]
    GradCheck {
        parameter: String,
        rel_err: f64,
        tol: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

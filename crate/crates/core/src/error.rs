use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label error: {0}")]
    Label(String),

    #[error("degenerate batch in {op}: {count} values per channel, need at least 2")]
    DegenerateBatch { op: &'static str, count: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("integrity error: {what}: expected {expected} bytes, found {actual}")]
    Integrity {
        what: String,
        expected: u64,
        actual: u64,
    },

    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss = {loss}")]
    Divergence {
        epoch: usize,
        iteration: usize,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Shape mismatch between two operands, naming both shapes.
    pub(crate) fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape {
            op,
            detail: format!("incompatible shapes {a:?} and {b:?}"),
        }
    }
}

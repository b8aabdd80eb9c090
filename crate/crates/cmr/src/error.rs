use thiserror::Error;

/// Errors surfaced by the library. Shape and schema problems carry enough
/// context to locate the offending tensor, record, or parameter.
#[derive(Debug, Error)]
pub enum CmrError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input for {op}: {reason}")]
    InvalidInput { op: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset schema error{}: {reason}", id.as_deref().map(|i| format!(" in record '{i}'")).unwrap_or_default())]
    Schema { id: Option<String>, reason: String },

    #[error("malformed line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("gradient check failed for {op}: max relative error {max_err:.3e} (tolerance {tol:.3e})")]
    GradCheckFailed {
        op: String,
        max_err: f64,
        tol: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CmrError>;

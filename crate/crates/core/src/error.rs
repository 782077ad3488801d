//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes.
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    Numeric(String),

    /// Invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Config file parse error carrying the offending line number (1-based).
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input data violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A metric is undefined for the supplied predictions (e.g. single class).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// A federated round could not complete.
    #[error("round failed: {0}")]
    Round(String),

    /// Privacy accounting is undefined for the supplied settings.
    #[error("privacy accounting: {0}")]
    Accounting(String),

    /// Problem exceeds the exact-enumeration budget.
    #[error("scale: {0}")]
    Scale(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}

use thiserror::Error;

/// Errors raised by tensor ops, point-cloud kernels, layers and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes are incompatible for the requested op.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an op's precondition (bad index, wrong tape, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A NaN or infinity was produced or supplied.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    /// A declarative spec or config failed validation; names the field.
    #[error("validation error in `{field}`: {msg}")]
    Validation { field: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn validation_err<T>(field: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation {
        field: field.to_string(),
        msg: msg.into(),
    })
}

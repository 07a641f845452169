use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants line up with the failure classes the command-line tool maps
/// onto exit codes: configuration problems, bad input data, and numeric
/// failures during training or evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;

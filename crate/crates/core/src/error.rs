use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Integrity(_) => "integrity",
            Error::Validation(_) => "validation",
            Error::Geometry(_) => "geometry",
            Error::Argument(_) => "argument",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
        }
    }
}

macro_rules! geometry {
    ($($arg:tt)*) => { $crate::Error::Geometry(format!($($arg)*)) };
}
macro_rules! argument {
    ($($arg:tt)*) => { $crate::Error::Argument(format!($($arg)*)) };
}
pub(crate) use {argument, geometry};

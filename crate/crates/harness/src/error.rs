use std::io;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] panfuse_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Dependency(String),
    #[error("artifacts from different configs: {0}")]
    MixedConfig(String),
    #[error("run directory is locked: {0}")]
    Locked(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(e) => e.kind(),
            Self::Config(_) => "config",
            Self::Dependency(_) => "dependency",
            Self::MixedConfig(_) => "mixed_config",
            Self::Locked(_) => "locked",
            Self::Checkpoint(_) => "checkpoint",
            Self::Usage(_) => "usage",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }

    /// Process exit code: 2 for bad invocations and configs, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Machine-readable form printed on stderr by the binary.
    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::HarnessError::Config(format!($($arg)*)) };
}
pub(crate) use config_err;

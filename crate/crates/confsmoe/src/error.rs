use confsmoe_core::CoreError;
use thiserror::Error;

/// Workspace-level error; `exit_code` maps variants onto the CLI contract
/// (1 config, 2 numerical, 3 audit).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("imputation error: {0}")]
    Imputation(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("audit failed: {0}")]
    Audit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::DataFormat(_) | Error::Json(_) | Error::Io(_) => 1,
            Error::Core(_) | Error::Imputation(_) | Error::Metric(_) | Error::Numerical(_) => 2,
            Error::Audit(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

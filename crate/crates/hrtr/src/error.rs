//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HrtrError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("window tiling error: {0}")]
    Tiling(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HrtrError>;

impl HrtrError {
    /// Exit code for CLI error surfaces: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HrtrError::Config(_) => 2,
            HrtrError::Data(_) | HrtrError::Io(_) | HrtrError::Tiling(_) => 3,
            HrtrError::Numeric(_) => 4,
        }
    }
}

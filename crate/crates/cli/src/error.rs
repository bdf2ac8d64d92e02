use fedcox_core::CoxError;
use fedcox_federation::error::core_category;
use fedcox_federation::leakage::AttackError;
use fedcox_federation::{ErrorCategory, FederationError};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CoxError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("attack: {0}")]
    Attack(#[from] AttackError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 0 success, 1 protocol or i/o, 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        let category = match self {
            CliError::Config(_) => ErrorCategory::Config,
            CliError::Data(_) => ErrorCategory::Data,
            CliError::Core(e) => core_category(e),
            CliError::Federation(e) => e.category(),
            CliError::Attack(_) => ErrorCategory::Numerical,
            CliError::Io { .. } | CliError::Json(_) => return 1,
        };
        match category {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numerical => 4,
            ErrorCategory::Protocol => 1,
        }
    }
}

pub fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

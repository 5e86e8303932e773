use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] ebm_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for unreadable or inconsistent data,
    /// 4 when the numerics blow up.
    pub fn exit_code(&self) -> i32 {
        use ebm_core::Error as E;
        match self {
            Self::Config(_) | Self::Core(E::InvalidArgument(_)) => 2,
            Self::Core(E::NonFinite(_)) => 4,
            Self::Io { .. } | Self::Core(_) => 3,
        }
    }
}

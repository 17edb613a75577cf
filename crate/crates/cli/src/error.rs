use std::path::Path;

/// Failure of a pipeline command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }

    pub(crate) fn at(path: &Path, err: vpc_core::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<vpc_core::Error> for CliError {
    fn from(err: vpc_core::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config: {0}")]
    Config(String),
    #[error("run directory {0} already exists")]
    RunDirExists(std::path::PathBuf),
    #[error(transparent)]
    Core(#[from] mevf_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn from_invalid(e: mevf_core::Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// 1 for configuration problems, 3 for numeric failure, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::UnknownKey(_) | CliError::Config(_) | CliError::RunDirExists(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(mevf_core::Error::InvalidArgument(_)) => 1,
            CliError::Core(_) | CliError::Io(_) => 2,
        }
    }
}

use thiserror::Error;

/// Failure of a subcommand, mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] evidal_core::Error),
    #[error("invalid config file: {0}")]
    ConfigFile(#[from] toml::de::Error),
    #[error("could not render config: {0}")]
    ConfigRender(#[from] toml::ser::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use evidal_core::Error as E;
        match self {
            Self::Usage(_) | Self::ConfigFile(_) | Self::ConfigRender(_) => EXIT_USAGE,
            Self::Core(E::Config(_)) => EXIT_USAGE,
            Self::Core(E::NonFinite(_)) => EXIT_NUMERIC,
            Self::Core(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

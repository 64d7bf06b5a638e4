use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, or a `--help`/`--version` request.
    #[error("{0}")]
    Usage(clap::Error),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] tide_core::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 usage or config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(tide_core::Error::Io(_)) => 4,
            CliError::Core(_) => 2,
        }
    }
}

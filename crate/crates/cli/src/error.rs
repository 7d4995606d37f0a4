use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("empty result: {0}")]
    Empty(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(tensorformer::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Empty(_) => 4,
            CliError::Check(_) => 5,
            CliError::Core(_) => 1,
        }
    }
}

impl From<tensorformer::Error> for CliError {
    fn from(e: tensorformer::Error) -> Self {
        use tensorformer::Error as E;
        match e {
            E::Io { .. } | E::Parse { .. } => CliError::Io(e.to_string()),
            E::InvalidArgument(_) => CliError::Config(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

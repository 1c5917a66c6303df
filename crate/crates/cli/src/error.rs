use learnds_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Integrity(_) => 4,
        }
    }
}

impl From<learnds::Error> for CliError {
    fn from(e: learnds::Error) -> Self {
        use learnds::Error as E;
        match e {
            E::Config(m) | E::Input(m) => CliError::Config(m),
            E::Integrity(m) => CliError::Integrity(m),
            E::Json(j) => CliError::Integrity(j.to_string()),
            E::Tensor(t) => t.into(),
            e @ (E::Diverged { .. } | E::Io(_)) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Checkpoint(m) => CliError::Integrity(m),
            TensorError::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                CliError::Integrity(format!("checkpoint is truncated: {io}"))
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

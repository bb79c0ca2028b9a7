use crate::checkpoint::CheckpointError;

/// Top-level failure of one invocation. Each variant owns an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Divergence(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Checkpoint(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Verification(_) => "verification",
            CliError::Divergence(_) => "divergence",
            CliError::Checkpoint(_) => "checkpoint",
        }
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string().replace('\n', " "),
        })
        .to_string()
    }
}

impl From<fedl::Error> for CliError {
    fn from(e: fedl::Error) -> Self {
        match e {
            fedl::Error::Config(_) => CliError::Usage(e.to_string()),
            fedl::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

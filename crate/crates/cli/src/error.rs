use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration; exit code 2.
    #[error("{0}")]
    Config(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
    /// Gradient check found mismatching components; exit code 1.
    #[error("gradient check failed: {0}")]
    GradientMismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::GradientMismatch(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
            CliError::GradientMismatch(_) => "gradcheck",
        }
    }
}

impl From<relalign::Error> for CliError {
    fn from(e: relalign::Error) -> Self {
        match e {
            relalign::Error::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

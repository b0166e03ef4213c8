use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, indices, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value or an unusable intermediate appeared during evaluation.
    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: String, detail: String },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            stage: stage.into(),
            detail: detail.into(),
        }
    }
}

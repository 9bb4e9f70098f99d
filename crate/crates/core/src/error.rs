use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-side contract was violated (sizes, shapes, missing inputs).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The data admit no estimate (e.g. a group with all-zero counts).
    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or corrupt file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss. `log` holds the training log CSV
    /// up to the failure.
    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String, log: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}

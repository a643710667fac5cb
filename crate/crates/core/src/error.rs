use thiserror::Error;

pub type Result<T> = std::result::Result<T, MatchError>;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty problem: every feature was pruned")]
    EmptyProblem,

    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// The ADMM loop produced a NaN or infinity.
    #[error("numeric divergence at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("degenerate spectrum: only {found} of {wanted} leading eigenvalues are nonnegative")]
    DegenerateSpectrum { wanted: usize, found: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MatchError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MatchError::InvalidArgument(msg.into())
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state encountered at step {step}")]
    NumericDivergence { step: usize },

    #[error("kernel matrix is ill-conditioned; factorization failed with jitter up to {jitter:e}")]
    IllConditionedKernel { jitter: f64 },

    #[error("stacked window system is rank deficient")]
    SingularWindow,

    #[error("innovation matrix C P C^T + R is not invertible")]
    SingularInnovation,

    #[error("mhe window t = {window}: {source}")]
    Window {
        window: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bomhe iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Returns true for errors that originate from numerical trouble rather
    /// than from malformed input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::InvalidArgument(_) => false,
            Error::Window { source, .. } | Error::Iteration { source, .. } => source.is_numeric(),
            _ => true,
        }
    }
}

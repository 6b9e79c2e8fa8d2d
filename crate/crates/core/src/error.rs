use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranks, empty inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A factorization or solve failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training produced a non-finite loss; carries the loss trace up to the failure.
    #[error("training diverged at step {step}: {reason}")]
    Training {
        step: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;

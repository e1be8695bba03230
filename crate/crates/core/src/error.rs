use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The linear system has no usable solution without regularization.
    #[error("ill-conditioned system (smallest singular value estimate {smallest_singular:.3e})")]
    IllConditioned { smallest_singular: f64 },

    #[error("class {class} has no samples")]
    Coverage { class: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

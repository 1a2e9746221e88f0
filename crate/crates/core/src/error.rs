use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Δt·γ(t) exceeded one, which would leave negative retention mass.
    #[error(
        "step size too large: unmask probability γ(t)·Δt = {product} > 1 at t = {time}; \
         use a smaller Δt (more steps)"
    )]
    StepTooLarge { product: f64, time: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("schedule violation: {0}")]
    Schedule(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss; carries the last parameters
    /// that gave a finite one.
    #[error("training diverged at iteration {iteration}: {message}")]
    Diverged {
        iteration: usize,
        message: String,
        last_good: Box<crate::denoiser::Denoiser>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical integration did not converge: {message} (residual estimate {residual:.3e})")]
    Numeric { message: String, residual: f64 },

    #[error("integrand is not integrable: {0}")]
    Integrability(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("constant fit failed: {0}")]
    Fit(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("cache i/o: {0}")]
    Cache(String),
}

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

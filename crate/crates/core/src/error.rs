use thiserror::Error;

/// Errors raised by the kernels, the fitter and the tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("quadrature did not converge within depth {max_depth} (partial value {partial})")]
    Quadrature { partial: f64, max_depth: u32 },

    #[error("encoding error: code {code} does not fit in {bits} bits")]
    Encoding { code: u8, bits: u8 },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

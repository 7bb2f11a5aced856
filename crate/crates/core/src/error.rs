use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Input violates a domain rule (label domains, registry partition, stage contract).
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed scan or label bytes.
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite values in activations, losses or gradients.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

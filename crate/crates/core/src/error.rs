use thiserror::Error;

/// Errors raised by the library. Allocation failures and protocol time-outs
/// are reported as outcomes, not errors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no free channels: expected attempts diverge")]
    Divergent,
    #[error("incomplete frame: missing sub-packets {missing:?}")]
    IncompleteFrame { missing: Vec<u8> },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("singular system (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: String, to: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

use alloc::string::String;

/// Errors raised by the core math. The std crate maps these onto exit codes.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("no estimate: nothing has been accumulated")]
    NoEstimate,
    #[error("structural error: {0}")]
    Structural(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("no acceptable step after {0} backtracks")]
    StepFailure(u32),
}

pub type Result<T> = core::result::Result<T, Error>;

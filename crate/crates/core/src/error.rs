use thiserror::Error;

/// Errors produced by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown dimension {0}")]
    UnknownDim(String),
    #[error("index {index} out of range for dimension of extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("non-finite value in tensor data")]
    NonFinite,
    #[error("fixed-point operands not aligned: {0} vs {1} fractional bits")]
    Misaligned(u32, u32),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

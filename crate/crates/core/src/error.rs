use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid format: {0}")]
    InvalidFormat(String),

    #[error("value {value} is not representable in {format} with bias {bias}")]
    NotRepresentable {
        value: f64,
        format: String,
        bias: i32,
    },

    #[error("codeword {bits:#x} does not fit in {width} bits")]
    InvalidCodeword { bits: u32, width: u32 },

    #[error("non-finite input at element {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("exponent bias {0} is outside the supported range")]
    BiasOutOfRange(i64),

    #[error("exponent bias is not set")]
    BiasUnset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("accumulator overflow at term {index}")]
    Overflow { index: usize },

    #[error("format {0} is outside the LUT reference table")]
    NoLutEntry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

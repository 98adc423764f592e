use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid quantization parameters: {0}")]
    Quant(String),

    #[error("illegal equalization placement: {0}")]
    Placement(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Token { id: u32, vocab: usize },

    #[error("accumulator overflow in {0}")]
    Overflow(String),

    #[error("scale ratio {0:e} is not representable as a fixed-point multiplier")]
    Requant(f64),

    #[error("model file: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Placement(_) | Error::Token { .. } | Error::Json(_) => 2,
            Error::NonFinite(_) | Error::Overflow(_) | Error::Requant(_) => 3,
            Error::Io(_) | Error::Format(_) | Error::Crc { .. } => 4,
            Error::Shape { .. } | Error::Axis { .. } | Error::Quant(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

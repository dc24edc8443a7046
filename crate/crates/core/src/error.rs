use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("element {index} does not fit the fixed-point range at {frac_bits} fractional bits")]
    EncodingOverflow { index: usize, frac_bits: u32 },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("scale mismatch in {op}: {left} vs {right} fractional bits")]
    ScaleMismatch { op: &'static str, left: u32, right: u32 },

    #[error("party mismatch in {op}")]
    PartyMismatch { op: &'static str },

    #[error("fractional bits {0} outside the supported range 1..=30")]
    InvalidFracBits(u32),

    #[error("{what} correlation at position {index} was already consumed")]
    CorrelationConsumed { what: &'static str, index: usize },

    #[error("{what} correlations exhausted after {available} entries")]
    CorrelationExhausted { what: &'static str, available: usize },

    #[error("truncation mode {0} needs a dealer truncation pair")]
    MissingTruncPair(&'static str),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite or non-positive normalization constant in {0}")]
    InvalidNorm(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error("protocol desync: {0}")]
    Desync(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

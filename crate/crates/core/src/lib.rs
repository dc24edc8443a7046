//! Arithmetic core for two-party private inference of square-activation
//! xMLP networks.
//!
//! Everything here is pure computation over `alloc` collections: fixed-point
//! tensors in the ring of integers modulo 2^64, additive 2-of-2 sharing,
//! dealer-issued square and truncation correlations, the xMLP model with its
//! float and fixed-point reference forward passes, and an online evaluator
//! that runs a compiled model program on shares over any [`OpenChannel`].
//! Transport, file formats and timing live in the `xpi` companion crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod error;
pub mod model;
pub mod online;
pub mod protocol;
pub mod real;
pub mod ring;
pub mod sharing;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{Error, Result};
pub use model::{
    forward_plain_fixed, forward_plain_float, ModelConfig, ModelWeights, NormConstants, NormStats,
    Program,
};
pub use online::{Phase, StepKind, StepObserver};
pub use protocol::{
    dealer_gen, CorrelatedRandomness, MulTriple, OpenChannel, SquarePair, TruncPair,
};
pub use real::RealTensor;
pub use ring::{decode_fixed, encode_fixed, FixedPointConfig, RingTensor, TruncMode};
pub use sharing::{PartyId, Share};

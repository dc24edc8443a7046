//! The xMLP model: topology, parameters, the float reference forward pass
//! and the quantized op program evaluated in fixed point and on shares.

pub mod config;
pub mod float;
pub mod program;
pub mod synth;
pub mod weights;

pub use config::{ModelConfig, IN_CHANNELS};
pub use float::forward_plain_float;
pub use program::{encode_images, forward_plain_fixed, Op, OpClass, Program};
pub use weights::{fold_norm, LayerWeights, ModelWeights, NormConstants, NormStats};

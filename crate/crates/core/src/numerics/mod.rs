//! Dense `f64` arrays, a tensor-level gradient tape, the attention and
//! normalization primitives, and Adam with plateau scheduling.

mod kernels;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use kernels::MASKED_SCORE;
pub use ops::{attention_weights, gelu, layer_norm, scaled_dot_attention};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

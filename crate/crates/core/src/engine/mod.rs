//! Dense arrays with reverse-mode differentiation, parameter storage and the
//! AdamW optimiser.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{Activation, FeedForward, LayerNorm, LayerSpec, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{DiffArray, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

//! Minimal tape-based reverse-mode differentiation over dense tensors.
//!
//! Only the operators the encoder, the Gaussian prototype head and the
//! episode loss need are provided. Every operator records its inputs and
//! any saved intermediates on a [`Tape`]; [`Tape::backward`] walks the tape
//! in reverse exactly once.

mod loss;
mod metric;
mod nn;
mod pointwise;
mod shape;
mod tape;

pub use nn::BatchStats;
pub use pointwise::{sigmoid, softplus};
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
}

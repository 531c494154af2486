//! Dense tensor arithmetic and deterministic random number generation.

mod rng;
mod tensor;

pub use rng::RngState;
pub use tensor::{finite_difference_gradient, ElemOp, Tensor};

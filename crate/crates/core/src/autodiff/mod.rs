//! Dense tensors with reverse-mode gradients.

mod array;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tensor;

pub use array::Array;
pub(crate) use array::log_softmax_row;
pub use gradcheck::{grad_check, grad_check_store};
pub use params::{Adam, Binder, Init, OptimConfig, ParamId, ParamStore};
pub use tensor::{Gradients, Graph, Op, Tensor};

use crate::error::Result;

/// Runs a single op by kind; equivalent to [`Tensor::apply`].
pub fn op_forward(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    Tensor::apply(op, inputs)
}

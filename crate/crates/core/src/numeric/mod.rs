//! Dense `f64` tensors and a reverse-mode differentiation tape.

mod tape;
mod tensor;

pub use tape::{Gradient, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.softmax_rows()
}

/// Gradient of the scalar `loss` with respect to `wrt`, both recorded on `tape`.
pub fn grad(tape: &Tape, loss: Var, wrt: Var) -> Result<Gradient> {
    tape.grad(loss, wrt)
}

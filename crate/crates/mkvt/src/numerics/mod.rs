//! Dense matrix and volume arithmetic, numerically stable softmax, seeded
//! randomness, and finite-difference differentiation.

mod grad;
mod matrix;
mod rng;
mod tensor;

pub use grad::{finite_diff_grad, max_rel_err};
pub use matrix::{matmul, softmax_rows, Matrix};
pub use rng::Rng;
pub use tensor::Tensor3;

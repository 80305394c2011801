//! Dense tensors, the differentiation tape and the kernels built on them.

mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{l2_normalize_rows, maxsim_normalized};
pub use scalar::{dot, Scalar};
pub use tape::{DualTensor, Mark, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

//! Dense tensors, the differentiation tape and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
mod tape;
mod tensor;

pub use checkpoint::{read_tensors, write_tensors, NamedTensor};
pub use gradcheck::{finite_diff_grad, max_relative_error, worst_of, FD_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

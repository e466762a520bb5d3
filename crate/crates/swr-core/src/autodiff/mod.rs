//! Minimal reverse-mode differentiation engine: tensors, a Wengert tape,
//! and exactly the operation set the rest of the crate needs.

mod kernels;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use tape::Tape;
pub use tensor::Tensor;

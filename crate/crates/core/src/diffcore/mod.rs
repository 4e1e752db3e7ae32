//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Broadcasting is limited to scalar-vs-tensor operands and row-vector
//! operands (`add_row`, `mul_row`); every loss in this crate is expressible
//! with those two forms.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

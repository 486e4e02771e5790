//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient oracle.

mod gemm;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_error, rel_error_floored, GradCheckOptions, GradCheckReport};
pub use params::{Gradients, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;

//! Numerical kernel: tensors, layer primitives with hand-written gradients,
//! AdamW and a finite-difference gradient checker.

pub mod adamw;
pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{grad_check, grad_check_against, relative_error, GradCheckReport};
pub use ops::{attention, cross_entropy_masked, layer_norm, softmax, Mask};
pub use tensor::{Float, Tensor};

//! Dense `f64` tensors with a reverse-mode differentiation tape.
//!
//! Values live in [`Tensor`]s; a [`Tape`] records every operation applied to
//! [`Var`] handles and replays them backwards in [`Tape::backward`].
//! [`GradCheck`] compares the analytic gradients against central differences.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport, GradFailure};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation on dense tensors.
//!
//! The engine is a classic Wengert tape: every op appends a node holding its
//! output value and the indices of its parents, and [`Tape::backward`] walks
//! the nodes in reverse creation order. Handles ([`Var`]) are plain indices
//! into the owning tape, so they are `Copy` and cheap to pass around; using a
//! handle with a tape other than the one that created it is a logic error.
//!
//! Everything is generic over [`Scalar`] so the same op implementations run
//! in `f32` for training and in `f64` for the finite-difference oracles.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grads, gradcheck, op_oracle_suite, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{FusedAct, Tape, TapeError, Var};
pub use tensor::Tensor;

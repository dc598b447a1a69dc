//! Dense f32 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The op set is deliberately small: exactly what a BEV-feature tracking
//! pipeline needs (matmul, conv2d, bilinear sampling, softmax, layer norm,
//! pooling, a handful of elementwise ops) plus three support pieces:
//!
//! * [`Tape`] — an append-only graph; every op validates shapes, checks its
//!   output for non-finite values and records a backward closure.
//! * [`grad_check`] — central finite differences against the recorded
//!   backward pass, used by the op tests and the `gradcheck` CLI command.
//! * [`serialize::WeightStore`] — named tensors in a little-endian binary
//!   format that round-trips bit-exactly.
//!
//! Downstream crates can register ops of their own through
//! [`Tape::custom_op`]; the correlation-volume lookup and deformable
//! sampling in the tracker are implemented that way.

mod error;
pub mod gradcheck;
mod ops;
pub mod serialize;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use serialize::{StoreError, WeightStore};
pub use ops::PoolKind;
pub use tape::{Backprop, GradBufs, Tape, Vals, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;

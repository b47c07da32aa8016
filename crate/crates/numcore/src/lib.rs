//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Everything is stored flat in row-major order. Forward passes are recorded
//! on a [`Tape`]; [`Tape::backward`] replays the records in reverse and
//! accumulates vector-Jacobian products. There is no implicit global state:
//! a tape is built, used and dropped per forward/backward pass, while the
//! long-lived [`Tensor`] values (weights, inputs) stay plain data.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod seed;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use seed::derive_seed;
pub use tape::{conv_out, convt_out, Tape, Var};
pub use tensor::Tensor;

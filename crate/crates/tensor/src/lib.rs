//! Dense tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain row-major array. A [`Tape`] evaluates primitives
//! eagerly, records them, and [`Tape::backward`] walks the record in
//! reverse to produce [`Gradients`]. The element type is generic over
//! [`Scalar`] so the same graph can run in `f32` for training and in `f64`
//! for finite-difference checks ([`gradcheck`]).

mod error;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{gradcheck, GradCheckOptions, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{CustomBackward, Gradients, Padding, Tape, Var};
pub use tensor::Tensor;

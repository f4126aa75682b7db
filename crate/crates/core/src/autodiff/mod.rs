//! Dense tensors with a reverse-mode gradient tape.
//!
//! Tensors are plain row-major buffers. Differentiable computation is
//! recorded on a [`Tape`]; trainable values live in a [`ParamStore`] and
//! enter a tape through [`Tape::param`]. After [`Tape::backward`] the
//! resulting [`Gradients`] are added into the store, so reusing a parameter
//! several times in one pass (for example across timesteps) sums its
//! contributions.

mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;
pub mod weights;

pub use gradcheck::{finite_difference_check, GradCheckReport, ParamGradError};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{ActivationKind, AttentionSpec, Gradients, Tape, Var};
pub use tensor::Tensor;

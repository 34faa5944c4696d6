//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] returns the
//! gradient of a scalar node with respect to every node. Besides the usual
//! dense-network primitives the tape carries a gradient-reversal node and two
//! fused losses (multivariate Gaussian NLL and softmax cross-entropy) whose
//! analytic gradients are saved during the forward pass.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Array;
#[doc(hidden)]
pub use tape::Fault;
pub use tape::{Gradients, NodeId, Tape, LOG_DIAG_MAX, LOG_DIAG_MIN, MIN_CHOL_DIAG};

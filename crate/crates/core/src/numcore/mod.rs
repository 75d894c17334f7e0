//! Dense tensors, a first-order reverse-mode tape, and finite-difference
//! Hessian probes.
//!
//! All arithmetic is `f64`. Non-finite intermediates are rejected at the op
//! that produced them instead of being carried forward.

mod hvp;
mod tape;
mod tensor;

pub use hvp::{hvp, power_iteration, value_and_grad, SpectralEstimate};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_softmax, logsumexp, naive_matmul, softmax, Tensor};

pub(crate) use hvp::l2;

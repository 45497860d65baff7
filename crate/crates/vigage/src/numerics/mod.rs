//! Double-precision tensors, a reverse-mode autodiff tape, and a
//! finite-difference gradient checker.
//!
//! Everything downstream (graph construction, attention, graph convolution,
//! the full network) is built from the ops recorded here, so gradient
//! correctness of the whole model reduces to the per-op backward rules —
//! each of which is verified against central differences.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, Parameters, DEFAULT_STEP, DEFAULT_TOL};
pub use tape::{stable_sigmoid, GraphTopology, Tape, TensorId};
pub use tensor::Tensor;

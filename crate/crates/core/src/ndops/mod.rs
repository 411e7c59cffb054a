//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_store, relative_error, GradCheckReport, FD_STEP, REL_ERR_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{argmax, kl_divergence, matmul, rms_norm, silu, softmax, transpose, PROB_FLOOR};
pub use params::{GradStore, ParamId, ParamStore};
pub use tensor::Tensor;

/// Default epsilon for RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

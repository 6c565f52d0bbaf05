//! Dense tensors, the differentiation tape, the symmetric eigensolver and
//! gradient verification.

pub mod eig;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use eig::{symmetric_eig, symmetric_eig_with, EigOptions, SymEig};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, GradSample, ROUNDING_FACTOR};
pub use params::{Bound, ParamStore};
pub use tape::{cosine_rows, cosine_sim, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Guard used by every cosine similarity in the model.
pub const COSINE_EPS: f64 = 1e-8;

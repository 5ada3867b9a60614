//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Only the primitives the model needs are provided: row gathers, matrix
//! products, elementwise arithmetic, `tanh`/`exp`/`log`/log-sigmoid, row
//! softmax and log-sum-exp, pairwise cosine similarity, reductions and a
//! fixed sparse linear operator for graph aggregation.

mod gradcheck;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use sparse::{LinearOperator, SparseMatrix};
pub use tape::{Tape, Var, COSINE_EPS};
pub use tensor::{Float, Tensor};

pub(crate) use tape::log_sigmoid;
pub(crate) use tensor::dot;

//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
pub mod gradcheck;
pub mod kernels;

pub use gradcheck::{gradient_check, gradient_check_report, GradCheckReport};
pub use graph::{Graph, OpRecord, Var};

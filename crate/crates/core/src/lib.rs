//! Hybrid-order relational knowledge distillation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod runner;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub use autodiff::Var;

//! Fully-connected teacher/assistant/student models and the resolution
//! degradation operator.

pub mod checkpoint;
mod images;
mod mlp;

pub use images::{degrade, ImageBatch};
pub use mlp::{Model, ModelOutput, ModelSpec};

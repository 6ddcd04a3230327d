//! Datasets and evaluation metrics.

pub mod eval;
pub mod idx;
mod synthetic;

pub use eval::{
    accuracy, topk_error, verify_pairs, verify_pairs_sweep, VerificationPair, VerificationPairSet,
};
pub use idx::{load_idx, write_idx};
pub use synthetic::{generate_synthetic, load_dataset, split, split_indices, DataSource, DatasetSpec, Split};

//! Hybrid-order relational distillation losses.

mod relational;
mod types;

pub use relational::{
    angle_potential, center_loss, compute_class_centers, order1_loss, order2_loss, order3_loss,
    select_triplets, total_distill_loss, vertex_triples, DistillLoss, LossBreakdown,
};
pub use types::{pairwise_stats, ClassCenters, FeatureBatch, LossWeights, PairwiseStats};

//! Training stages and the two-stage distillation pipeline.
pub mod report;
mod stage;

pub use report::{EpochRecord, StepRecord, TrainReport};
pub use stage::{
    embed, epoch_batches, kd_soft_baseline, recombined_total, run_stage, run_two_stage, train_supervised, StageKind, StageOutcome,
    StagePlan, TrainHyper, TwoStageOutcome,
};

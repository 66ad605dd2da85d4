//! Diffusion schedule, losses, checkpoints and the staged trainer.

pub mod checkpoint;
pub mod losses;
pub mod schedule;
mod trainer;

pub use losses::{loss_defect, loss_noise, loss_preprocess, loss_total, LossReport, LossWeights};
pub use schedule::NoiseSchedule;
pub use trainer::{frozen_groups, train, StepRecord, TrainOptions, TrainOutcome, STAGES};
pub(crate) use trainer::volume_tensor;

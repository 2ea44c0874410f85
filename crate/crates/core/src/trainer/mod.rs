//! Pre-training and fine-tuning loops: Adam with linear warmup, gradient
//! clipping and seeded, resumable schedules.

mod adam;
mod config;
mod finetune;
mod pretrain;
mod schedule;

pub use adam::{adam_step, global_norm, StepOutcome};
pub use config::{Decay, TrainConfig};
pub use finetune::{finetune, selection_metric, EpochRecord, FinetuneInit, FinetuneJob, FinetuneRun};
pub use pretrain::{batch_gradient, mlm_top1, pretrain, pretrain_until, BatchGradient, PretrainJob, PretrainRun, StepRecord};
pub use schedule::lr_at;

#[cfg(test)]
mod tests;

//! Speaker-aware transformer encoder, task heads and checkpoints.

mod checkpoint;
mod config;
mod encoder;
mod heads;
mod objective;
mod params;

pub use checkpoint::{Checkpoint, OptimizerMoments, FORMAT_VERSION, MAGIC};
pub use config::EncoderConfig;
pub use encoder::Forward;
pub use heads::{gold_nll, preceding_mask, total_loss, total_loss_value, LossTerms};
pub use objective::pretrain_terms;
pub use params::{Bound, ClassifierIds, EncoderParams, LayerIds, ParamIds, TensorInfo, TransformIds};

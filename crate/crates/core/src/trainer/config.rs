use serde::{Deserialize, Serialize};

use crate::error::{MpcError, Result};

/// Shape of the learning rate after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    /// Linear decay to zero at the last step.
    #[default]
    Linear,
    /// Hold the peak rate.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_proportion: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Train for exactly this many optimizer steps instead of `epochs`,
    /// cycling through further epochs as needed.
    pub max_steps: Option<usize>,
    pub decay: Decay,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            lr: 5e-5,
            warmup_proportion: 0.1,
            epochs: 10,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip_norm: Some(1.0),
            max_steps: None,
            decay: Decay::Linear,
        }
    }

    /// Fine-tuning defaults; response selection trains for 5 epochs.
    pub fn finetune_default(rs: bool) -> Self {
        TrainConfig {
            lr: 2e-5,
            epochs: if rs { 5 } else { 10 },
            batch_size: 16,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MpcError::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_proportion) {
            return Err(MpcError::invalid(format!("warmup proportion {} is outside [0, 1)", self.warmup_proportion)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return Err(MpcError::invalid("epochs, batch size and max steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(MpcError::invalid("Adam needs β1, β2 ∈ [0, 1) and ε > 0"));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(MpcError::invalid("clip norm must be positive"));
        }
        Ok(())
    }

    /// Optimizer steps for `examples` training examples.
    pub fn total_steps(&self, examples: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| examples.div_ceil(self.batch_size) * self.epochs)
    }
}

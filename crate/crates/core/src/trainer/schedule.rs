use super::config::{Decay, TrainConfig};
use crate::error::{MpcError, Result};

/// Learning rate at `step` of `total`: linear ramp from 0 to `cfg.lr` over
/// the first `warmup_proportion · total` steps, then the configured decay
/// (linear reaches 0 at `total`). Update k (0-based) uses `lr_at(k, ..)`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if total == 0 {
        return Err(MpcError::invalid("schedule over zero steps"));
    }
    if step > total {
        return Err(MpcError::invalid(format!("step {step} is past the last step {total}")));
    }
    let (s, n) = (step as f64, total as f64);
    let warm = cfg.warmup_proportion * n;
    if s < warm {
        return Ok(cfg.lr * s / warm);
    }
    Ok(match cfg.decay {
        Decay::Constant => cfg.lr,
        Decay::Linear => cfg.lr * (n - s) / (n - warm),
    })
}

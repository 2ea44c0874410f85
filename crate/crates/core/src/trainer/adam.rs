use log::warn;

use super::config::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::{MpcError, Result};
use crate::model::OptimizerMoments;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    /// Update applied; `grad_norm` is the norm before clipping.
    Applied { grad_norm: f64 },
    /// A gradient was NaN or infinite; nothing changed.
    Skipped,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One Adam update with bias correction, after clipping the global gradient
/// norm to `cfg.clip_norm`. The moment step counter advances only when the
/// update is applied.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    moments: &mut OptimizerMoments,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    if grads.len() != params.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(MpcError::shape("adam_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (k, p) in params.iter().enumerate() {
        if grads[k].shape() != p.shape() || moments.m[k].shape() != p.shape() || moments.v[k].shape() != p.shape() {
            return Err(MpcError::shape("adam_step", format!("tensor {k}: {:?} vs {:?}", p.shape(), grads[k].shape())));
        }
    }
    if let Some(k) = grads.iter().position(|g| !g.all_finite()) {
        warn!("non-finite gradient in tensor {k}; step skipped");
        return Ok(StepOutcome::Skipped);
    }

    let norm = global_norm(grads);
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => Some((norm, c)),
        _ => None,
    };
    moments.t += 1;
    let t = moments.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let m = moments.m[k].data_mut();
        let v = moments.v[k].data_mut();
        for (i, (w, &g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
            let g = match clip {
                Some((n, c)) => g / n * c,
                None => g,
            };
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(StepOutcome::Applied { grad_norm: norm })
}

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{MpcError, Result};

/// Central-difference step and denominator floor for [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-4, floor: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn eval<F>(points: &[Tensor], f: &F) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(MpcError::shape("finite_diff_check", "function must be scalar-valued"));
    }
    Ok((g, vars, out))
}

/// Compares backward against central differences over every coordinate of
/// every input. `f` must be deterministic (dropout off, fixed RNG).
pub fn finite_diff_check_many<F>(points: &[Tensor], cfg: GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = eval(points, &f)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(g);

    let mut per_input = Vec::with_capacity(points.len());
    let mut coordinates = 0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for c in 0..points[k].numel() {
            let x0 = points[k].data()[c];
            work[k].data_mut()[c] = x0 + cfg.h;
            let (gp, _, op) = eval(&work, &f)?;
            let fp = gp.value(op).item();
            work[k].data_mut()[c] = x0 - cfg.h;
            let (gm, _, om) = eval(&work, &f)?;
            let fm = gm.value(om).item();
            work[k].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let rel = (a.data()[c] - numeric).abs() / numeric.abs().max(cfg.floor);
            worst = worst.max(rel);
            coordinates += 1;
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        coordinates,
    })
}

/// Single-input form; returns the max relative error.
pub fn finite_diff_check<F>(point: &Tensor, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = finite_diff_check_many(std::slice::from_ref(point), GradCheck::default(), |g, v| f(g, v[0]))?;
    Ok(report.max_rel_error)
}

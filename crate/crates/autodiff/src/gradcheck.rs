//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so entries whose true gradient is
/// essentially zero are judged on absolute error instead.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest relative error among entries whose finite-difference stencil
    /// stayed on the smooth piece of the analytic evaluation.
    pub max_rel_err_smooth: f64,
    /// Entries whose `±step` evaluations crossed a ReLU, clamp or max-pool
    /// switch, where central differences do not estimate the derivative.
    pub kink_crossings: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the whole tensor.
    pub norm_rel_err: f64,
    /// The same over the smooth entries only.
    pub norm_rel_err_smooth: f64,
    pub numel: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub max_rel_err_smooth: f64,
    /// Largest per-tensor norm-wise relative error.
    pub max_norm_rel_err: f64,
    pub max_norm_rel_err_smooth: f64,
    pub kink_crossings: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff gradients of `f` at `point` against central differences
/// with step `step`. `f` receives one trainable leaf per entry of `point`
/// and must return a scalar node.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    grad_check_with_floor(f, point, step, DEFAULT_REL_FLOOR)
}

pub fn grad_check_with_floor<F>(f: F, point: &[Tensor<f64>], step: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |pt: &[Tensor<f64>]| -> Result<(f64, Vec<u32>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pt.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &ids);
        // Same validation as the analytic path.
        let v = g.value(loss).clone();
        if v.numel() != 1 || !v.all_finite() {
            g.backward(loss)?;
        }
        Ok((v.item(), g.branch_pattern()))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &ids);
    let grads = g.backward(loss)?;
    let pattern = g.branch_pattern();

    let mut per_param = Vec::with_capacity(point.len());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut worst: f64 = 0.0;
    for (pi, (t, &id)) in point.iter().zip(&ids).enumerate() {
        let analytic = grads.get(id);
        let mut check = ParamCheck {
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            max_abs_err: 0.0,
            max_rel_err_smooth: 0.0,
            kink_crossings: 0,
            norm_rel_err: 0.0,
            norm_rel_err_smooth: 0.0,
            numel: t.numel(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let (mut all_diff2, mut all_a2, mut all_n2) = (0.0, 0.0, 0.0);
        for e in 0..t.numel() {
            let perturbed = |delta: f64| {
                let mut d = t.to_vec();
                d[e] += delta;
                let mut pt = point.to_vec();
                pt[pi] = Tensor::from_vec(t.shape(), d);
                pt
            };
            let (plus, p_plus) = eval(&perturbed(step))?;
            let (minus, p_minus) = eval(&perturbed(-step))?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let rel = relative_error(a, numeric, floor);
            check.max_rel_err = check.max_rel_err.max(rel);
            all_diff2 += (a - numeric) * (a - numeric);
            all_a2 += a * a;
            all_n2 += numeric * numeric;
            if p_plus == pattern && p_minus == pattern {
                check.max_rel_err_smooth = check.max_rel_err_smooth.max(rel);
                diff2 += (a - numeric) * (a - numeric);
                a2 += a * a;
                n2 += numeric * numeric;
            } else {
                check.kink_crossings += 1;
            }
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.mean_rel_err += rel;
        }
        check.norm_rel_err = all_diff2.sqrt() / all_a2.sqrt().max(all_n2.sqrt()).max(floor);
        check.norm_rel_err_smooth = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor);
        total += check.mean_rel_err;
        count += t.numel();
        check.mean_rel_err /= t.numel() as f64;
        worst = worst.max(check.max_rel_err);
        per_param.push(check);
    }
    Ok(GradCheckReport {
        max_rel_err_smooth: per_param.iter().map(|p| p.max_rel_err_smooth).fold(0.0, f64::max),
        max_norm_rel_err: per_param.iter().map(|p| p.norm_rel_err).fold(0.0, f64::max),
        max_norm_rel_err_smooth: per_param.iter().map(|p| p.norm_rel_err_smooth).fold(0.0, f64::max),
        kink_crossings: per_param.iter().map(|p| p.kink_crossings).sum(),
        per_param,
        max_rel_err: worst,
        mean_rel_err: if count > 0 { total / count as f64 } else { 0.0 },
    })
}

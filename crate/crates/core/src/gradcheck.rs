//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes on fresh graphs, so it
//! shares no code with [`Graph::backward`].

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, REL_FLOOR)` over all checked entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(param index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Denominator floor of the relative error: gradients smaller than this are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Evaluates `build` on `params` (bound as tracked leaves) and compares its
/// backward gradients with central differences of step `h`.
pub fn check<F>(params: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| Ok(g.grad(v)?.map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)))
        .collect::<Result<_>>()?;

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss)?
            .item()
            .ok_or_else(|| invalid("gradcheck", "loss is not a scalar"))
    };

    let mut report = GradCheckReport::default();
    let mut work = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = rel_err(grads[e], numeric);
            report.max_abs_err = report.max_abs_err.max((grads[e] - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((pi, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

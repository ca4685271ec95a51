//! Central finite-difference checks for graph operations.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to verify.

use crate::error::{contract_err, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Absolute floor in the relative-error denominator. Below it the
/// comparison degrades to an absolute one, where finite differences carry
/// roughly `1e-10` of rounding noise.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `d f / d inputs` from the tape against central differences.
///
/// `f` must build a scalar from the given input vars; it is re-run on a
/// fresh graph for every perturbed coordinate.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return contract_err("gradient check needs a scalar function");
    }
    g.backward(out)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let o = f(&mut g, &vs)?;
        g.value(o).item()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].numel() {
            let base = inputs[k].data()[j];
            probe[k].data_mut()[j] = base + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = base - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

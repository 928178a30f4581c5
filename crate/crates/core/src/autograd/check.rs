//! Central-difference gradient checking.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the one-sided differences disagree,
    /// i.e. the function has a kink within `step` of the point.
    pub non_smooth: usize,
}

const REL_FLOOR: f64 = 1e-5;
const MAX_COORDS_PER_INPUT: usize = 64;

/// Compares `analytic[i]` against central differences of `eval` around
/// `point`. Inputs with more than 64 elements are probed on an evenly spaced
/// subset of coordinates.
pub fn check_gradients(
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
    point: &[Tensor],
    analytic: &[Tensor],
    step: f64,
) -> Result<GradCheck> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {step} must be positive")));
    }
    if analytic.len() != point.len() {
        return Err(Error::invalid("one analytic gradient per input is required"));
    }
    let center = eval(point)?;
    let mut work: Vec<Tensor> = point.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        non_smooth: 0,
    };
    for (i, grad) in analytic.iter().enumerate() {
        point[i].expect_same_shape(grad)?;
        let numel = point[i].numel();
        let stride = numel.div_ceil(MAX_COORDS_PER_INPUT).max(1);
        for j in (0..numel).step_by(stride) {
            let orig = point[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let forward = (plus - center) / step;
            let backward = (center - minus) / step;
            let kink = (forward - backward).abs() > (1e-2 * forward.abs().max(backward.abs())).max(1e3 * step);
            if kink {
                report.non_smooth += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Builds `op` on fresh leaves holding `point`, backpropagates, and checks
/// the result with [`check_gradients`]. `op` must return a scalar node.
pub fn finite_diff_check(
    mut op: impl FnMut(&mut Graph, &[Var]) -> Result<Var>,
    point: &[Tensor],
    step: f64,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &leaves)?;
    let grads = g.gradients(out)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(point)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    check_gradients(
        |inputs| {
            let mut g = Graph::new();
            let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = op(&mut g, &leaves)?;
            Ok(g.value(out).item())
        },
        point,
        &analytic,
        step,
    )
}

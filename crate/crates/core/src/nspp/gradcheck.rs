use crate::error::{invalid, Result};
use crate::grid::{LogAmpGrid, PhaseGrid};

use super::losses::{kink_violations, LossWeights};
use super::model::{loss_and_grad, predict_phase, total_loss, ModelParams};

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Target used for the check after moving it away from loss kinks.
    pub target: PhaseGrid,
}

/// Moves target entries until every loss argument is at least `margin` away from a
/// kink of the anti-wrapping function. The walk is deterministic.
pub fn nudge_target(pred: &PhaseGrid, target: &PhaseGrid, margin: f64) -> PhaseGrid {
    let mut t = target.clone();
    let len = t.data().len();
    let mut violations = kink_violations(pred, &t, margin);
    for round in 0..50 {
        if violations == 0 {
            break;
        }
        // growing, incommensurate steps keep neighbouring differences from re-aligning
        let step = 3.0 * margin * (1.0 + 0.618_033_988_7 * (round + 1) as f64);
        for i in 0..len {
            let original = t.data()[i];
            t.data_mut()[i] = original + step * (1.0 + (i % 5) as f64 * 0.37);
            let after = kink_violations(pred, &t, margin);
            if after < violations {
                violations = after;
            } else {
                t.data_mut()[i] = original;
            }
            if violations == 0 {
                break;
            }
        }
    }
    t
}

/// Compares analytic gradients with central finite differences on every parameter.
///
/// `rel = |analytic − numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(
    params: &ModelParams,
    input: &LogAmpGrid,
    target: &PhaseGrid,
    weights: &LossWeights,
    step: f64,
) -> Result<GradCheckReport> {
    if input.frames() > 6 || input.bins() > 8 {
        return Err(invalid(format!(
            "gradient check instance {:?} exceeds 6 frames × 8 bins",
            input.shape()
        )));
    }
    let pred = predict_phase(params, input)?;
    let target = nudge_target(&pred, target, 1e-3);
    let (_, analytic) = loss_and_grad(params, input, &target, weights)?;

    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for ti in 0..params.tensors().len() {
        for idx in 0..params.tensors()[ti].data.len() {
            let original = params.tensors()[ti].data[idx];
            probe.tensors_mut()[ti].data[idx] = original + step;
            let plus = total_loss(&probe, input, &target, weights)?.total;
            probe.tensors_mut()[ti].data[idx] = original - step;
            let minus = total_loss(&probe, input, &target, weights)?.total;
            probe.tensors_mut()[ti].data[idx] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.tensors[ti][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((params.tensors()[ti].name.clone(), idx));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        target,
    })
}

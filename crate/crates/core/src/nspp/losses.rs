//! Anti-wrapping phase losses.
//!
//! All three losses pass a phase error through `f_AW(x) = |x − 2π·round(x / 2π)|`,
//! which is 2π-periodic, so predictions that differ from the target by whole turns
//! cost nothing. IP compares phases directly, GD compares differences along the
//! frequency axis and IAF along the time axis.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Grid, PhaseGrid, RealGrid};

/// Distance to the nearest multiple of 2π, in `[0, π]`.
#[inline]
pub fn anti_wrap(x: f64) -> f64 {
    residual(x).abs().min(PI)
}

/// `x − 2π·round(x / 2π)`.
#[inline]
fn residual(x: f64) -> f64 {
    x - TAU * (x / TAU).round()
}

/// Subgradient of [`anti_wrap`]: the sign of the wrapped residual, 0 at the residual's zero.
#[inline]
pub fn anti_wrap_slope(x: f64) -> f64 {
    let r = residual(x);
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ip: f64,
    pub gd: f64,
    pub iaf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ip: 1.0,
            gd: 1.0,
            iaf: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.ip, self.gd, self.iaf];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Individual loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ip: f64,
    pub gd: f64,
    pub iaf: f64,
    pub total: f64,
}

fn check_shapes(pred: &PhaseGrid, target: &PhaseGrid) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(invalid(format!(
            "predicted {:?} and target {:?} phase shapes differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

pub fn ip_loss(pred: &PhaseGrid, target: &PhaseGrid) -> Result<f64> {
    check_shapes(pred, target)?;
    if pred.data().is_empty() {
        return Err(invalid("instantaneous phase loss of an empty grid"));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| anti_wrap(p - t))
        .sum();
    Ok(sum / pred.data().len() as f64)
}

pub fn gd_loss(pred: &PhaseGrid, target: &PhaseGrid) -> Result<f64> {
    check_shapes(pred, target)?;
    if pred.bins() < 2 || pred.frames() == 0 {
        return Err(invalid("group delay loss needs at least 2 bins"));
    }
    let mut sum = 0.0;
    for (pr, tr) in pred.rows().zip(target.rows()) {
        for n in 0..pred.bins() - 1 {
            sum += anti_wrap((pr[n + 1] - pr[n]) - (tr[n + 1] - tr[n]));
        }
    }
    Ok(sum / (pred.frames() * (pred.bins() - 1)) as f64)
}

pub fn iaf_loss(pred: &PhaseGrid, target: &PhaseGrid) -> Result<f64> {
    check_shapes(pred, target)?;
    if pred.frames() < 2 || pred.bins() == 0 {
        return Err(invalid("instantaneous angular frequency loss needs at least 2 frames"));
    }
    let bins = pred.bins();
    let (p, t) = (pred.data(), target.data());
    let sum: f64 = (0..(pred.frames() - 1) * bins)
        .map(|i| anti_wrap((p[i + bins] - p[i]) - (t[i + bins] - t[i])))
        .sum();
    Ok(sum / ((pred.frames() - 1) * bins) as f64)
}

/// Weighted losses and their gradient with respect to `pred`. Terms with zero weight
/// are skipped (and may therefore be evaluated on grids too small for them).
pub fn weighted_loss(
    pred: &PhaseGrid,
    target: &PhaseGrid,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<RealGrid>)> {
    weights.validate()?;
    check_shapes(pred, target)?;
    let (frames, bins) = pred.shape();
    let mut out = LossBreakdown::default();
    let mut grad = with_grad.then(|| Grid::filled(frames, bins, 0.0));
    let (p, t) = (pred.data(), target.data());

    if weights.ip > 0.0 {
        out.ip = ip_loss(pred, target)?;
        if let Some(g) = grad.as_mut() {
            let scale = weights.ip / (frames * bins) as f64;
            for (gi, (pi, ti)) in g.data_mut().iter_mut().zip(p.iter().zip(t)) {
                *gi += scale * anti_wrap_slope(pi - ti);
            }
        }
    }
    if weights.gd > 0.0 {
        out.gd = gd_loss(pred, target)?;
        if let Some(g) = grad.as_mut() {
            let scale = weights.gd / (frames * (bins - 1)) as f64;
            let gd = g.data_mut();
            for f in 0..frames {
                let base = f * bins;
                for n in base..base + bins - 1 {
                    let s = scale * anti_wrap_slope((p[n + 1] - p[n]) - (t[n + 1] - t[n]));
                    gd[n + 1] += s;
                    gd[n] -= s;
                }
            }
        }
    }
    if weights.iaf > 0.0 {
        out.iaf = iaf_loss(pred, target)?;
        if let Some(g) = grad.as_mut() {
            let scale = weights.iaf / ((frames - 1) * bins) as f64;
            let gd = g.data_mut();
            for i in 0..(frames - 1) * bins {
                let s = scale * anti_wrap_slope((p[i + bins] - p[i]) - (t[i + bins] - t[i]));
                gd[i + bins] += s;
                gd[i] -= s;
            }
        }
    }
    out.total = weights.ip * out.ip + weights.gd * out.gd + weights.iaf * out.iaf;
    Ok((out, grad))
}

/// Number of loss arguments closer than `margin` to a kink of the anti-wrapping function.
pub fn kink_violations(pred: &PhaseGrid, target: &PhaseGrid, margin: f64) -> usize {
    let (frames, bins) = pred.shape();
    let (p, t) = (pred.data(), target.data());
    let near = |x: f64| {
        let r = residual(x).abs();
        usize::from(r.min(PI - r) < margin)
    };
    (0..p.len())
        .map(|i| {
            let mut v = near(p[i] - t[i]);
            if (i % bins) + 1 < bins {
                v += near((p[i + 1] - p[i]) - (t[i + 1] - t[i]));
            }
            if i + bins < frames * bins {
                v += near((p[i + bins] - p[i]) - (t[i + bins] - t[i]));
            }
            v
        })
        .sum()
}

/// Smallest distance from any loss argument (phase error and its frequency/time
/// differences) to a kink of the anti-wrapping function, i.e. a multiple of π.
pub fn kink_distance(pred: &PhaseGrid, target: &PhaseGrid) -> f64 {
    let (frames, bins) = pred.shape();
    let (p, t) = (pred.data(), target.data());
    let to_kink = |x: f64| {
        let r = residual(x).abs();
        r.min(PI - r)
    };
    let mut best = f64::INFINITY;
    for i in 0..p.len() {
        best = best.min(to_kink(p[i] - t[i]));
        if (i % bins) + 1 < bins {
            best = best.min(to_kink((p[i + 1] - p[i]) - (t[i + 1] - t[i])));
        }
        if i + bins < frames * bins {
            best = best.min(to_kink((p[i + bins] - p[i]) - (t[i + bins] - t[i])));
        }
    }
    best
}

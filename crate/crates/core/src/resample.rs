//! Frame-rate conversion of spectral grids.
//!
//! Each frequency bin of a long-shift log amplitude grid is treated as an independent
//! sequence over frames. Upsampling by an integer ratio `D` inserts `D − 1` zeros after
//! each sample and low-pass filters with a Blackman-windowed sinc whose gain is `D`
//! in the passband. The filter has exact zeros at every nonzero multiple of `D`, so the
//! original samples survive untouched at output indices `0, D, 2D, …`. Decimation
//! selects those same rows back out of a short-shift grid.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::DEFAULT_AMP_FLOOR;
use crate::error::{invalid, Result};
use crate::grid::{Grid, LogAmpGrid, PhaseGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpWindow {
    #[default]
    Blackman,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpConfig {
    /// Ratio `D` between the long and the short frame shift.
    pub ratio: usize,
    /// Number of original samples `K` the filter reaches on each side.
    pub half_width: usize,
    pub window: InterpWindow,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            ratio: 2,
            half_width: 8,
            window: InterpWindow::Blackman,
        }
    }
}

impl InterpConfig {
    pub fn with_ratio(ratio: usize) -> Self {
        Self {
            ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 1 {
            return Err(invalid("interpolation ratio must be at least 1"));
        }
        if self.half_width < 4 {
            return Err(invalid(format!(
                "filter half width {} must be at least 4",
                self.half_width
            )));
        }
        Ok(())
    }
}

/// Linear-phase, odd-length, symmetric interpolation filter.
#[derive(Clone, Debug, PartialEq)]
pub struct FirFilter {
    taps: Vec<f64>,
    ratio: usize,
}

impl FirFilter {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    /// Index of the center tap, which is also the group delay in samples.
    pub fn center(&self) -> usize {
        self.taps.len() / 2
    }

    /// Zero-phase magnitude response at `omega` radians/sample.
    pub fn response(&self, omega: f64) -> f64 {
        let c = self.center();
        self.taps[c]
            + 2.0
                * (1..=c)
                    .map(|m| self.taps[c + m] * (omega * m as f64).cos())
                    .sum::<f64>()
    }

    pub fn dc_gain(&self) -> f64 {
        self.taps.iter().sum()
    }
}

/// Places `seq[f]` at index `D·f` and zeros elsewhere.
pub fn zero_insert(seq: &[f64], ratio: usize) -> Result<Vec<f64>> {
    if ratio < 1 {
        return Err(invalid("zero insertion ratio must be at least 1"));
    }
    let mut out = vec![0.0; seq.len() * ratio];
    for (f, &v) in seq.iter().enumerate() {
        out[f * ratio] = v;
    }
    Ok(out)
}

fn blackman(u: f64) -> f64 {
    0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// `taps[m] ∝ sinc(m/D) · blackman(m/(K·D))` for `m = −K·D ..= K·D`.
///
/// Each polyphase branch (taps with equal `m mod D`) is scaled to sum to exactly one,
/// so constant sequences interpolate to the same constant and the total gain is `D`.
/// For `D = 1` the filter reduces to the single unit tap.
pub fn design_interp_filter(cfg: &InterpConfig) -> Result<FirFilter> {
    cfg.validate()?;
    let d = cfg.ratio;
    if d == 1 {
        return Ok(FirFilter {
            taps: vec![1.0],
            ratio: 1,
        });
    }
    let reach = (cfg.half_width * d) as isize;
    let mut taps: Vec<f64> = (-reach..=reach)
        .map(|m| {
            if m == 0 {
                1.0
            } else if m % d as isize == 0 {
                // sin(πk) is not exactly zero in floating point
                0.0
            } else {
                let window = match cfg.window {
                    InterpWindow::Blackman => blackman(m as f64 / reach as f64),
                };
                sinc(m as f64 / d as f64) * window
            }
        })
        .collect();
    // mirrored branches share one factor so the taps stay exactly symmetric
    for phase in 1..=d / 2 {
        let branch_sum: f64 = taps.iter().skip(phase).step_by(d).sum();
        for p in [phase, d - phase] {
            taps.iter_mut()
                .skip(p)
                .step_by(d)
                .for_each(|t| *t /= branch_sum);
            if d - phase == phase {
                break;
            }
        }
    }
    Ok(FirFilter { taps, ratio: d })
}

/// Zero insertion followed by the interpolation filter, aligned so that
/// `out[D·f] == seq[f]`. Samples outside the sequence replicate its edges.
pub fn interpolate_sequence(seq: &[f64], filter: &FirFilter) -> Vec<f64> {
    let d = filter.ratio;
    let len = seq.len();
    if len == 0 {
        return Vec::new();
    }
    let c = filter.center() as isize;
    let taps = &filter.taps;
    let di = d as isize;
    (0..(len * d) as isize)
        .map(|j| {
            // polyphase: only the nonzero samples of the zero-inserted sequence contribute
            let k_lo = (j - c).div_euclid(di) + if (j - c).rem_euclid(di) == 0 { 0 } else { 1 };
            let k_hi = (j + c).div_euclid(di);
            (k_lo..=k_hi)
                .map(|k| {
                    let v = seq[k.clamp(0, len as isize - 1) as usize];
                    v * taps[(c + j - k * di) as usize]
                })
                .sum()
        })
        .collect()
}

pub fn interpolate_complex_sequence(seq: &[Complex64], filter: &FirFilter) -> Vec<Complex64> {
    let re: Vec<f64> = seq.iter().map(|z| z.re).collect();
    let im: Vec<f64> = seq.iter().map(|z| z.im).collect();
    interpolate_sequence(&re, filter)
        .into_iter()
        .zip(interpolate_sequence(&im, filter))
        .map(|(r, i)| Complex64::new(r, i))
        .collect()
}

/// Interpolates every bin (column) of `grid` independently; output has `D·F` frames.
pub fn interpolate_grid(grid: &LogAmpGrid, cfg: &InterpConfig) -> Result<LogAmpGrid> {
    let filter = design_interp_filter(cfg)?;
    Ok(interpolate_grid_with(grid, &filter))
}

pub fn interpolate_grid_with(grid: &LogAmpGrid, filter: &FirFilter) -> LogAmpGrid {
    let frames = grid.frames() * filter.ratio();
    let mut out = Grid::filled(frames, grid.bins(), 0.0);
    for n in 0..grid.bins() {
        out.set_column(n, &interpolate_sequence(&grid.column(n), filter));
    }
    out
}

/// Keeps rows `0, D, 2D, …`.
pub fn decimate_grid<T: Copy>(grid: &Grid<T>, ratio: usize) -> Result<Grid<T>> {
    if ratio < 1 {
        return Err(invalid("decimation ratio must be at least 1"));
    }
    if grid.frames() % ratio != 0 {
        return Err(invalid(format!(
            "{} frames are not divisible by ratio {ratio}",
            grid.frames()
        )));
    }
    let frames = grid.frames() / ratio;
    let mut data = Vec::with_capacity(frames * grid.bins());
    for f in 0..frames {
        data.extend_from_slice(grid.row(f * ratio));
    }
    Grid::new(frames, grid.bins(), data)
}

/// Per-bin L1 distance between interpolating log amplitudes directly and taking the
/// log magnitude of the interpolated complex spectrum.
pub fn interpolation_error(
    log_amp: &LogAmpGrid,
    phase: &PhaseGrid,
    cfg: &InterpConfig,
) -> Result<Vec<f64>> {
    if !log_amp.same_shape(phase) {
        return Err(invalid(format!(
            "log amplitude {:?} and phase {:?} shapes differ",
            log_amp.shape(),
            phase.shape()
        )));
    }
    let filter = design_interp_filter(cfg)?;
    if filter.ratio() == 1 {
        // identity interpolation: |exp(a)·exp(ip)| = exp(a) exactly
        return Ok(vec![0.0; log_amp.bins()]);
    }
    Ok((0..log_amp.bins())
        .map(|n| {
            let a = log_amp.column(n);
            let spectrum: Vec<Complex64> = a
                .iter()
                .zip(phase.column(n))
                .map(|(&amp, p)| Complex64::from_polar(amp.exp(), p))
                .collect();
            interpolate_sequence(&a, &filter)
                .iter()
                .zip(interpolate_complex_sequence(&spectrum, &filter))
                .map(|(&ia, z)| (ia - z.norm().max(DEFAULT_AMP_FLOOR).ln()).abs())
                .sum()
        })
        .collect())
}

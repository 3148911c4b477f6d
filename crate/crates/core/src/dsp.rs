//! Short-time Fourier analysis and synthesis, windowing, and phase/amplitude features.
//!
//! Frames are centered: the signal is reflect-padded by `frame_length / 2` on both
//! sides, so frame `f` is centered on sample `f · frame_shift`. Each windowed frame
//! sits at the start of an `fft_size` buffer whose tail is zero.
//!
//! Synthesis is the least-squares inverse of analysis: windowed overlap-add whose
//! contributions that fall into the padding are folded back onto the samples they
//! were reflected from, then divided by the (equally folded) sum of squared windows.
//! `stft ∘ istft` is therefore the orthogonal projection onto consistent spectrograms
//! under the two-sided spectral norm (see [`two_sided_norm_sqr`]).

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{ComplexGrid, LogAmpGrid, PhaseGrid};

pub const DEFAULT_AMP_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    HannPeriodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub frame_shift: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 16 kHz, 20 ms frames, 10 ms shift, 1024-point FFT.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length: 320,
            frame_shift: 160,
            fft_size: 1024,
            window: WindowKind::HannPeriodic,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(invalid("sample_rate must be positive"));
        }
        if self.frame_length < 2 {
            return Err(invalid("frame_length must be at least 2"));
        }
        if self.frame_shift == 0 || self.frame_shift > self.frame_length {
            return Err(invalid(format!(
                "frame_shift {} must lie in [1, frame_length = {}]",
                self.frame_shift, self.frame_length
            )));
        }
        if self.fft_size < self.frame_length || !self.fft_size.is_power_of_two() {
            return Err(invalid(format!(
                "fft_size {} must be a power of two no smaller than frame_length {}",
                self.fft_size, self.frame_length
            )));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins, `fft_size / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len / self.frame_shift + 1
    }

    /// The same analysis with the shift divided by `ratio`.
    pub fn with_shift_divided(&self, ratio: usize) -> Result<Self> {
        if ratio == 0 || self.frame_shift % ratio != 0 {
            return Err(invalid(format!(
                "frame shift {} is not divisible by ratio {ratio}",
                self.frame_shift
            )));
        }
        Ok(Self {
            frame_shift: self.frame_shift / ratio,
            ..*self
        })
    }

    pub fn frame_shift_seconds(&self) -> f64 {
        self.frame_shift as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Periodic Hann window `0.5 − 0.5·cos(2πn / length)`.
pub fn make_window(length: usize) -> Result<Vec<f64>> {
    if length < 2 {
        return Err(invalid(format!("window length {length} < 2")));
    }
    Ok((0..length)
        .map(|n| 0.5 - 0.5 * (TAU * n as f64 / length as f64).cos())
        .collect())
}

/// Mirror index into `[0, len)` without repeating the edge sample.
#[inline]
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reusable analysis/synthesis plan for one configuration.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            cfg: *cfg,
            window: make_window(cfg.frame_length)?,
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn analyze(&self, x: &[f64]) -> Result<ComplexGrid> {
        if x.is_empty() {
            return Err(invalid("cannot analyze an empty waveform"));
        }
        let cfg = &self.cfg;
        let frames = cfg.frame_count(x.len());
        let bins = cfg.bins();
        let half = (cfg.frame_length / 2) as isize;

        let mut buf = self.forward.make_input_vec();
        let mut spec = self.forward.make_output_vec();
        let mut scratch = self.forward.make_scratch_vec();
        let mut data = Vec::with_capacity(frames * bins);
        for f in 0..frames {
            let start = (f * cfg.frame_shift) as isize - half;
            for (j, (slot, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                *slot = w * x[reflect_index(start + j as isize, x.len())];
            }
            buf[cfg.frame_length..].fill(0.0);
            self.forward
                .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                .expect("buffer sizes come from the plan");
            data.extend_from_slice(&spec);
        }
        ComplexGrid::new(frames, bins, data)
    }

    /// Least-squares inverse for a signal of `length` samples.
    ///
    /// Frames beyond `frame_count(length)` are dropped. The imaginary parts of the DC
    /// and Nyquist bins are ignored.
    pub fn synthesize(&self, c: &ComplexGrid, length: usize) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if c.bins() != cfg.bins() {
            return Err(invalid(format!(
                "grid has {} bins, configuration expects {}",
                c.bins(),
                cfg.bins()
            )));
        }
        if length == 0 {
            return Ok(Vec::new());
        }
        let half = (cfg.frame_length / 2) as isize;
        let frames = c.frames().min(cfg.frame_count(length));
        let scale = 1.0 / cfg.fft_size as f64;

        let mut num = vec![0.0; length];
        let mut den = vec![0.0; length];
        let mut spec = self.inverse.make_input_vec();
        let mut buf = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        let last = spec.len() - 1;
        for f in 0..frames {
            spec.copy_from_slice(c.row(f));
            spec[0].im = 0.0;
            spec[last].im = 0.0;
            self.inverse
                .process_with_scratch(&mut spec, &mut buf, &mut scratch)
                .expect("imaginary parts of DC and Nyquist are zeroed");
            let start = (f * cfg.frame_shift) as isize - half;
            for (j, (&y, &w)) in buf.iter().zip(&self.window).enumerate() {
                let t = reflect_index(start + j as isize, length);
                num[t] += w * y * scale;
                den[t] += w * w;
            }
        }

        let tiny = 1e-12;
        num.iter()
            .zip(&den)
            .enumerate()
            .map(|(t, (&n, &d))| {
                if d > tiny {
                    Ok(n / d)
                } else {
                    Err(Error::Degenerate(format!(
                        "window normalization vanishes at sample {t}"
                    )))
                }
            })
            .collect()
    }
}

pub fn stft(x: &Waveform, cfg: &StftConfig) -> Result<ComplexGrid> {
    if x.sample_rate() != cfg.sample_rate {
        return Err(invalid(format!(
            "waveform rate {} differs from configuration rate {}",
            x.sample_rate(),
            cfg.sample_rate
        )));
    }
    Stft::new(cfg)?.analyze(x.samples())
}

pub fn istft(c: &ComplexGrid, cfg: &StftConfig, length_hint: usize) -> Result<Waveform> {
    let samples = Stft::new(cfg)?.synthesize(c, length_hint)?;
    Waveform::new(samples, cfg.sample_rate)
}

/// Reduces an angle to its principal value in (−π, π].
pub fn principal_phase(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(invalid(format!("cannot wrap non-finite angle {theta}")));
    }
    Ok(wrap(theta))
}

#[inline]
pub(crate) fn wrap(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Four-quadrant angle in (−π, π]; the origin maps to 0.
#[inline]
pub fn angle(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let a = im.atan2(re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

pub fn log_amplitude(c: &ComplexGrid, amp_floor: f64) -> Result<LogAmpGrid> {
    if !(amp_floor > 0.0) {
        return Err(invalid(format!("amp_floor must be positive, got {amp_floor}")));
    }
    Ok(c.map(|z| z.norm().max(amp_floor).ln()))
}

pub fn phase_of(c: &ComplexGrid) -> PhaseGrid {
    c.map(|z| angle(z.re, z.im))
}

/// Squared norm of the full (two-sided) spectrum represented by a one-sided grid:
/// interior bins are counted twice, DC and Nyquist once.
pub fn two_sided_norm_sqr(c: &ComplexGrid) -> f64 {
    let last = c.bins().saturating_sub(1);
    c.rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(n, z)| {
                    let weight = if n == 0 || n == last { 1.0 } else { 2.0 };
                    weight * z.norm_sqr()
                })
                .sum::<f64>()
        })
        .sum()
}

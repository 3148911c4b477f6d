//! Iterative phase retrieval from STFT amplitudes: Griffin-Lim, fast Griffin-Lim and
//! RAAR, plus a wrapper that runs any estimator at a shorter frame shift on
//! interpolated amplitudes and decimates the result.
//!
//! The inconsistency trace is `r_k = ‖C_k − P_C(C_k)‖ / ‖A‖` with both norms taken over
//! the two-sided spectrum, the norm in which `P_C` is an orthogonal projection. Entry
//! `k < K` is measured on the iterate fed to the projections; the last entry is
//! measured on the returned estimate.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{phase_of, two_sided_norm_sqr, Stft, StftConfig};
use crate::error::{invalid, Result};
use crate::grid::{ComplexGrid, Grid, LogAmpGrid, PhaseGrid, RealGrid};
use crate::nspp::{predict_phase, ModelParams};
use crate::resample::{decimate_grid, interpolate_grid, InterpConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Gla,
    FastGla,
    Raar,
}

impl std::str::FromStr for Algorithm {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gla" => Ok(Self::Gla),
            "fastgla" | "fast_gla" => Ok(Self::FastGla),
            "raar" => Ok(Self::Raar),
            other => Err(invalid(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseInit {
    #[default]
    ZeroPhase,
    RandomPhase {
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterAlgoConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    /// Extrapolation weight of fast Griffin-Lim, in [0, 1).
    pub momentum_alpha: f64,
    /// RAAR relaxation, in (0, 1].
    pub beta: f64,
    pub init: PhaseInit,
}

impl Default for IterAlgoConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Gla,
            iterations: 100,
            momentum_alpha: 0.99,
            beta: 0.9,
            init: PhaseInit::ZeroPhase,
        }
    }
}

impl IterAlgoConfig {
    pub fn new(algorithm: Algorithm, iterations: usize) -> Self {
        Self {
            algorithm,
            iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum_alpha) {
            return Err(invalid(format!(
                "momentum_alpha {} must lie in [0, 1)",
                self.momentum_alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(invalid(format!("beta {} must lie in (0, 1]", self.beta)));
        }
        Ok(())
    }
}

/// Estimated phase and the inconsistency trace of the run.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalOutcome {
    pub phase: PhaseGrid,
    pub trace: Vec<f64>,
}

impl RetrievalOutcome {
    /// Inconsistency of the returned estimate, if any iteration ran.
    pub fn final_inconsistency(&self) -> Option<f64> {
        self.trace.last().copied()
    }
}

fn check_amplitudes(a: &RealGrid) -> Result<()> {
    if let Some(v) = a.data().iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(invalid(format!("amplitudes must be finite and nonnegative, found {v}")));
    }
    Ok(())
}

/// Rescales every element to magnitude `a`, keeping its angle; zero elements take angle 0.
pub fn amplitude_projection(c: &ComplexGrid, a: &RealGrid) -> Result<ComplexGrid> {
    if !c.same_shape(a) {
        return Err(invalid(format!(
            "spectrum {:?} and amplitude {:?} shapes differ",
            c.shape(),
            a.shape()
        )));
    }
    check_amplitudes(a)?;
    let mut out = c.clone();
    project_amplitude_in_place(out.data_mut(), a.data());
    Ok(out)
}

fn project_amplitude_in_place(c: &mut [Complex64], a: &[f64]) {
    for (z, &m) in c.iter_mut().zip(a) {
        let norm = z.norm();
        *z = if norm > 0.0 {
            *z * (m / norm)
        } else {
            Complex64::new(m, 0.0)
        };
    }
}

/// Projection onto spectrograms of real signals, for grids of a fixed frame count.
///
/// The underlying signal length is `(frames − 1) · frame_shift`, the shortest length
/// that produces `frames` frames.
#[derive(Debug)]
pub struct Projector {
    stft: Stft,
    frames: usize,
    length: usize,
}

impl Projector {
    pub fn new(cfg: &StftConfig, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(invalid("cannot project a grid with no frames"));
        }
        Self::with_length(cfg, (frames - 1) * cfg.frame_shift)
    }

    /// Projection for signals of exactly `length` samples.
    pub fn with_length(cfg: &StftConfig, length: usize) -> Result<Self> {
        if length == 0 {
            return Err(invalid("consistency projection needs a nonempty signal"));
        }
        Ok(Self {
            stft: Stft::new(cfg)?,
            frames: cfg.frame_count(length),
            length,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn consistency(&self, c: &ComplexGrid) -> Result<ComplexGrid> {
        if c.frames() != self.frames {
            return Err(invalid(format!(
                "grid has {} frames, projector expects {}",
                c.frames(),
                self.frames
            )));
        }
        self.stft.analyze(&self.stft.synthesize(c, self.length)?)
    }

    /// One RAAR update: `(β/2)(R_A(R_C(C)) + C) + (1 − β)·P_C(C)` with `R = 2P − Id`.
    pub fn raar_step(&self, c: &ComplexGrid, a: &RealGrid, beta: f64) -> Result<ComplexGrid> {
        let pc = self.consistency(c)?;
        Ok(raar_combine(c, &pc, a, beta))
    }
}

fn raar_combine(c: &ComplexGrid, pc: &ComplexGrid, a: &RealGrid, beta: f64) -> ComplexGrid {
    let mut next = c.clone();
    for (((out, &z), &p), &m) in next
        .data_mut()
        .iter_mut()
        .zip(c.data())
        .zip(pc.data())
        .zip(a.data())
    {
        let rc = 2.0 * p - z;
        let norm = rc.norm();
        let pa = if norm > 0.0 {
            rc * (m / norm)
        } else {
            Complex64::new(m, 0.0)
        };
        let ra = 2.0 * pa - rc;
        *out = (beta / 2.0) * (ra + z) + (1.0 - beta) * p;
    }
    next
}

/// `stft(istft(C))` for the shortest signal that yields `C`'s frame count.
pub fn consistency_projection(c: &ComplexGrid, cfg: &StftConfig) -> Result<ComplexGrid> {
    Projector::new(cfg, c.frames())?.consistency(c)
}

fn inconsistency(c: &ComplexGrid, pc: &ComplexGrid, norm_a: f64) -> f64 {
    let diff = Grid::new(
        c.frames(),
        c.bins(),
        c.data().iter().zip(pc.data()).map(|(x, y)| x - y).collect(),
    )
    .expect("shapes match");
    two_sided_norm_sqr(&diff).sqrt() / norm_a
}

/// Initial iterate `A·e^{iφ₀}` for the configured initialization.
pub fn initial_spectrum(a: &RealGrid, init: PhaseInit) -> ComplexGrid {
    match init {
        PhaseInit::ZeroPhase => a.map(|m| Complex64::new(m, 0.0)),
        PhaseInit::RandomPhase { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            a.map(|m| Complex64::from_polar(m, rng.gen_range(-PI..PI)))
        }
    }
}

fn prepare(a: &RealGrid, cfg: &StftConfig, acfg: &IterAlgoConfig) -> Result<()> {
    acfg.validate()?;
    cfg.validate()?;
    check_amplitudes(a)?;
    if a.bins() != cfg.bins() {
        return Err(invalid(format!(
            "amplitude grid has {} bins, configuration expects {}",
            a.bins(),
            cfg.bins()
        )));
    }
    if a.frames() == 0 {
        return Err(invalid("amplitude grid has no frames"));
    }
    Ok(())
}

/// Runs the configured algorithm from its configured initialization.
pub fn retrieve(a: &RealGrid, cfg: &StftConfig, acfg: &IterAlgoConfig) -> Result<RetrievalOutcome> {
    prepare(a, cfg, acfg)?;
    retrieve_from(a, initial_spectrum(a, acfg.init), cfg, acfg)
}

/// Runs the configured algorithm from an explicit initial spectrum (its magnitudes are
/// replaced by `a` first).
pub fn retrieve_from(
    a: &RealGrid,
    initial: ComplexGrid,
    cfg: &StftConfig,
    acfg: &IterAlgoConfig,
) -> Result<RetrievalOutcome> {
    prepare(a, cfg, acfg)?;
    let norm_a = two_sided_norm_sqr(&a.map(|m| Complex64::new(m, 0.0))).sqrt();
    if norm_a == 0.0 {
        return Ok(RetrievalOutcome {
            phase: Grid::filled(a.frames(), a.bins(), 0.0),
            trace: Vec::new(),
        });
    }
    let c0 = amplitude_projection(&initial, a)?;
    let proj = Projector::new(cfg, a.frames())?;
    let k = acfg.iterations;
    let mut trace = Vec::with_capacity(k + 1);

    let estimate = match acfg.algorithm {
        Algorithm::Gla => {
            let mut c = c0;
            for _ in 0..k {
                let mut pc = proj.consistency(&c)?;
                trace.push(inconsistency(&c, &pc, norm_a));
                project_amplitude_in_place(pc.data_mut(), a.data());
                c = pc;
            }
            c
        }
        Algorithm::FastGla => {
            let alpha = acfg.momentum_alpha;
            let mut c = c0.clone();
            let mut t_prev = c0;
            for _ in 0..k {
                let mut t = proj.consistency(&c)?;
                trace.push(inconsistency(&c, &t, norm_a));
                project_amplitude_in_place(t.data_mut(), a.data());
                if alpha == 0.0 {
                    c = t.clone();
                } else {
                    c = t.clone();
                    for ((z, &tn), &tp) in c.data_mut().iter_mut().zip(t.data()).zip(t_prev.data()) {
                        *z = tn + alpha * (tn - tp);
                    }
                }
                t_prev = t;
            }
            t_prev
        }
        Algorithm::Raar => {
            let mut c = c0;
            for _ in 0..k {
                let pc = proj.consistency(&c)?;
                trace.push(inconsistency(&c, &pc, norm_a));
                c = raar_combine(&c, &pc, a, acfg.beta);
            }
            if k > 0 {
                let mut out = proj.consistency(&c)?;
                project_amplitude_in_place(out.data_mut(), a.data());
                out
            } else {
                c
            }
        }
    };
    if k > 0 {
        let pc = proj.consistency(&estimate)?;
        trace.push(inconsistency(&estimate, &pc, norm_a));
    }
    Ok(RetrievalOutcome {
        phase: phase_of(&estimate),
        trace,
    })
}

pub fn gla(a: &RealGrid, cfg: &StftConfig, acfg: &IterAlgoConfig) -> Result<RetrievalOutcome> {
    retrieve(
        a,
        cfg,
        &IterAlgoConfig {
            algorithm: Algorithm::Gla,
            ..*acfg
        },
    )
}

pub fn fast_gla(a: &RealGrid, cfg: &StftConfig, acfg: &IterAlgoConfig) -> Result<RetrievalOutcome> {
    retrieve(
        a,
        cfg,
        &IterAlgoConfig {
            algorithm: Algorithm::FastGla,
            ..*acfg
        },
    )
}

pub fn raar(a: &RealGrid, cfg: &StftConfig, acfg: &IterAlgoConfig) -> Result<RetrievalOutcome> {
    retrieve(
        a,
        cfg,
        &IterAlgoConfig {
            algorithm: Algorithm::Raar,
            ..*acfg
        },
    )
}

/// A phase estimator usable inside [`lfs_wrap`].
#[derive(Clone, Copy, Debug)]
pub enum Estimator<'a> {
    Iterative(IterAlgoConfig),
    Model(&'a ModelParams),
}

/// Interpolates the long-shift log amplitudes by `interp.ratio`, estimates phase at the
/// correspondingly shorter shift and keeps every `ratio`-th frame.
pub fn lfs_wrap(
    estimator: Estimator<'_>,
    las: &LogAmpGrid,
    interp: &InterpConfig,
    cfg: &StftConfig,
) -> Result<PhaseGrid> {
    let short_cfg = cfg.with_shift_divided(interp.ratio)?;
    let dense = interpolate_grid(las, interp)?;
    let phase = match estimator {
        Estimator::Iterative(acfg) => retrieve(&dense.map(f64::exp), &short_cfg, &acfg)?.phase,
        Estimator::Model(params) => predict_phase(params, &dense)?,
    };
    decimate_grid(&phase, interp.ratio)
}

/// Phase estimate from an amplitude grid at the analysis shift, without interpolation.
pub fn estimate_direct(estimator: Estimator<'_>, las: &LogAmpGrid, cfg: &StftConfig) -> Result<PhaseGrid> {
    match estimator {
        Estimator::Iterative(acfg) => Ok(retrieve(&las.map(f64::exp), cfg, &acfg)?.phase),
        Estimator::Model(params) => predict_phase(params, las),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_amplitude, stft, Waveform, DEFAULT_AMP_FLOOR};
    use std::f64::consts::TAU;

    fn small_cfg() -> StftConfig {
        StftConfig {
            sample_rate: 8000,
            frame_length: 64,
            frame_shift: 16,
            fft_size: 64,
            ..StftConfig::default()
        }
    }

    fn harmonic(len: usize, sr: f64) -> Vec<f64> {
        (0..len)
            .map(|t| {
                let t = t as f64 / sr;
                0.5 * (TAU * 440.0 * t).sin() + 0.25 * (TAU * 880.0 * t + 0.3).sin()
            })
            .collect()
    }

    fn max_diff(a: &ComplexGrid, b: &ComplexGrid) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn amplitude_projection_examples() {
        let c = Grid::new(1, 3, vec![
            Complex64::new(2.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, -3.0),
        ])
        .unwrap();
        let a = Grid::new(1, 3, vec![5.0, 2.0, 1.0]).unwrap();
        let p = amplitude_projection(&c, &a).unwrap();
        assert_eq!(p.data()[0], Complex64::new(5.0, 0.0));
        assert_eq!(p.data()[1], Complex64::new(2.0, 0.0));
        assert!((p.data()[2] - Complex64::new(0.0, -1.0)).norm() < 1e-15);
        let twice = amplitude_projection(&p, &a).unwrap();
        assert!(max_diff(&p, &twice) < 1e-15);
        let neg = Grid::new(1, 3, vec![1.0, -1.0, 1.0]).unwrap();
        assert!(amplitude_projection(&c, &neg).is_err());
    }

    #[test]
    fn consistency_projection_fixes_real_spectra() {
        let cfg = small_cfg();
        let x = harmonic(15 * cfg.frame_shift, 8000.0);
        let c = stft(&Waveform::new(x, 8000).unwrap(), &cfg).unwrap();
        let p = consistency_projection(&c, &cfg).unwrap();
        assert!(max_diff(&c, &p) < 1e-9);

        let zero = ComplexGrid::filled(16, cfg.bins(), Complex64::new(0.0, 0.0));
        assert!(max_diff(&consistency_projection(&zero, &cfg).unwrap(), &zero) == 0.0);

        let a = c.magnitudes();
        let once = consistency_projection(&initial_spectrum(&a, PhaseInit::ZeroPhase), &cfg).unwrap();
        let twice = consistency_projection(&once, &cfg).unwrap();
        assert!(max_diff(&once, &twice) < 1e-9);
    }

    #[test]
    fn zero_iterations_return_initial_phase() {
        let cfg = small_cfg();
        let a = Grid::filled(5, cfg.bins(), 1.0);
        for algorithm in [Algorithm::Gla, Algorithm::FastGla, Algorithm::Raar] {
            let out = retrieve(&a, &cfg, &IterAlgoConfig::new(algorithm, 0)).unwrap();
            assert!(out.phase.data().iter().all(|&p| p == 0.0));
            assert!(out.trace.is_empty());
        }
        let init = PhaseInit::RandomPhase { seed: 3 };
        let out = retrieve(
            &a,
            &cfg,
            &IterAlgoConfig {
                init,
                ..IterAlgoConfig::new(Algorithm::Raar, 0)
            },
        )
        .unwrap();
        let expected = phase_of(&initial_spectrum(&a, init));
        for (x, y) in out.phase.data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn silent_input_gives_zero_phase_and_empty_trace() {
        let cfg = small_cfg();
        let a = Grid::filled(4, cfg.bins(), 0.0);
        let out = gla(&a, &cfg, &IterAlgoConfig::default()).unwrap();
        assert!(out.phase.data().iter().all(|&p| p == 0.0));
        assert!(out.trace.is_empty());
    }

    #[test]
    fn true_phase_is_a_fixed_point() {
        let cfg = small_cfg();
        let x = harmonic(20 * cfg.frame_shift, 8000.0);
        let c = stft(&Waveform::new(x, 8000).unwrap(), &cfg).unwrap();
        let a = c.magnitudes();
        let truth = phase_of(&c);
        let out = retrieve_from(&a, c.clone(), &cfg, &IterAlgoConfig::new(Algorithm::Gla, 1)).unwrap();
        for ((p, t), m) in out.phase.data().iter().zip(truth.data()).zip(a.data()) {
            if *m > 1e-6 {
                assert!(crate::nspp::anti_wrap(p - t) < 1e-6);
            }
        }
        let next = Projector::new(&cfg, c.frames()).unwrap().raar_step(&c, &a, 0.9).unwrap();
        assert!(max_diff(&next, &c) < 1e-9);
    }

    #[test]
    fn gla_trace_does_not_increase() {
        let cfg = small_cfg();
        let x = harmonic(30 * cfg.frame_shift + 5, 8000.0);
        let c = stft(&Waveform::new(x, 8000).unwrap(), &cfg).unwrap();
        let out = gla(&c.magnitudes(), &cfg, &IterAlgoConfig::new(Algorithm::Gla, 100)).unwrap();
        assert_eq!(out.trace.len(), 101);
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{w:?}");
        }
        assert!(out.phase.data().iter().all(|p| *p > -PI && *p <= PI));
    }

    #[test]
    fn fast_gla_without_momentum_is_gla() {
        let cfg = small_cfg();
        let x = harmonic(12 * cfg.frame_shift, 8000.0);
        let a = stft(&Waveform::new(x, 8000).unwrap(), &cfg).unwrap().magnitudes();
        let acfg = IterAlgoConfig {
            momentum_alpha: 0.0,
            init: PhaseInit::RandomPhase { seed: 9 },
            iterations: 25,
            ..IterAlgoConfig::default()
        };
        let g = gla(&a, &cfg, &acfg).unwrap();
        let f = fast_gla(&a, &cfg, &acfg).unwrap();
        let bits = |p: &PhaseGrid| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g.phase), bits(&f.phase));
        assert_eq!(g.trace, f.trace);
    }

    #[test]
    fn raar_with_unit_beta_is_averaged_reflections() {
        let cfg = small_cfg();
        let x = harmonic(6 * cfg.frame_shift, 8000.0);
        let a = stft(&Waveform::new(x, 8000).unwrap(), &cfg).unwrap().magnitudes();
        let c = initial_spectrum(&a, PhaseInit::RandomPhase { seed: 1 });
        let proj = Projector::new(&cfg, a.frames()).unwrap();
        let next = proj.raar_step(&c, &a, 1.0).unwrap();
        // (R_A R_C + Id) / 2 written out as C + P_A(2P_C C − C) − P_C C
        let pc = proj.consistency(&c).unwrap();
        let rc = Grid::new(
            c.frames(),
            c.bins(),
            c.data().iter().zip(pc.data()).map(|(z, p)| 2.0 * p - z).collect(),
        )
        .unwrap();
        let pa = amplitude_projection(&rc, &a).unwrap();
        for i in 0..c.data().len() {
            let expected = c.data()[i] + pa.data()[i] - pc.data()[i];
            assert!((next.data()[i] - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn lfs_wrap_shapes_and_identity_ratio() {
        let cfg = StftConfig {
            sample_rate: 8000,
            frame_length: 64,
            frame_shift: 32,
            fft_size: 64,
            ..StftConfig::default()
        };
        let x = harmonic(8000 / 4, 8000.0);
        let c = stft(&Waveform::new(x, 8000).unwrap(), &cfg).unwrap();
        let las = log_amplitude(&c, DEFAULT_AMP_FLOOR).unwrap();
        let acfg = IterAlgoConfig::new(Algorithm::Raar, 10);
        for d in [1, 2, 4] {
            let p = lfs_wrap(Estimator::Iterative(acfg), &las, &InterpConfig::with_ratio(d), &cfg).unwrap();
            assert_eq!(p.shape(), las.shape());
        }
        let wrapped = lfs_wrap(Estimator::Iterative(acfg), &las, &InterpConfig::with_ratio(1), &cfg).unwrap();
        let direct = estimate_direct(Estimator::Iterative(acfg), &las, &cfg).unwrap();
        assert_eq!(wrapped, direct);
    }

    #[test]
    fn config_validation() {
        let mut acfg = IterAlgoConfig::default();
        assert!(acfg.validate().is_ok());
        acfg.momentum_alpha = 1.0;
        assert!(acfg.validate().is_err());
        acfg = IterAlgoConfig {
            beta: 0.0,
            ..IterAlgoConfig::default()
        };
        assert!(acfg.validate().is_err());
        assert_eq!("fastgla".parse::<Algorithm>().unwrap(), Algorithm::FastGla);
        assert!("admm".parse::<Algorithm>().is_err());
    }
}

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, LogAmpGrid, PhaseGrid};

use super::losses::LossWeights;
use super::model::{loss_and_grad, Gradients, ModelParams};

/// One utterance: network input and the phase it should produce.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub input: LogAmpGrid,
    pub target: PhaseGrid,
}

impl TrainingExample {
    pub fn new(input: LogAmpGrid, target: PhaseGrid) -> Result<Self> {
        if !input.same_shape(&target) {
            return Err(invalid(format!(
                "input {:?} and target {:?} shapes differ",
                input.shape(),
                target.shape()
            )));
        }
        Ok(Self { input, target })
    }

    fn crop(&self, start: usize, frames: usize) -> Self {
        let bins = self.input.bins();
        let slice = |g: &Grid<f64>| {
            Grid::new(frames, bins, g.data()[start * bins..(start + frames) * bins].to_vec())
                .expect("crop lies inside the grid")
        };
        Self {
            input: slice(&self.input),
            target: slice(&self.target),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `v ← μ·v − η·g`, `θ ← θ + v`.
    Momentum,
    /// Adam with `β₁ = momentum`, `β₂ = 0.999`, `ε = 1e−8` and bias correction.
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Utterances whose gradients are averaged per step.
    pub batch_size: usize,
    /// Random crop length in frames; 0 trains on whole utterances.
    pub crop_frames: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 1,
            crop_frames: 0,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean batch loss before each update.
    pub trace: Vec<f64>,
}

/// Training stopped because the loss or a gradient became non-finite.
#[derive(Debug)]
pub struct TrainError {
    pub step: usize,
    pub reason: String,
    /// Parameters before the failing step.
    pub last_good: ModelParams,
    pub trace: Vec<f64>,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training diverged at step {}: {}", self.step, self.reason)
    }
}

impl std::error::Error for TrainError {}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        Error::NonFinite(e.to_string())
    }
}

/// Gradient descent with the configured optimizer.
///
/// Each step draws `batch_size` utterances (and crop offsets) from a generator seeded
/// with `cfg.seed`, so a run is fully reproducible.
pub fn train(
    params: ModelParams,
    dataset: &[TrainingExample],
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainError> {
    let fail = |step, reason: String, last_good: ModelParams, trace: Vec<f64>| TrainError {
        step,
        reason,
        last_good,
        trace,
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(0, e.to_string(), params, Vec::new()));
    }
    if dataset.is_empty() {
        return Err(fail(0, "empty training set".into(), params, Vec::new()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params;
    let mut velocity = Gradients::zeros_like(&params);
    let mut second = Gradients::zeros_like(&params);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grad = Gradients::zeros_like(&params);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let ex = &dataset[rng.gen_range(0..dataset.len())];
            let frames = ex.input.frames();
            let ex = if cfg.crop_frames > 0 && frames > cfg.crop_frames {
                let start = rng.gen_range(0..=frames - cfg.crop_frames);
                ex.crop(start, cfg.crop_frames)
            } else {
                ex.clone()
            };
            match loss_and_grad(&params, &ex.input, &ex.target, &cfg.weights) {
                Ok((l, g)) => {
                    loss += l.total;
                    grad.add_scaled(&g, 1.0 / cfg.batch_size as f64);
                }
                Err(e) => return Err(fail(step, e.to_string(), params, trace)),
            }
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(fail(step, format!("loss became {loss}"), params, trace));
        }
        trace.push(loss);

        let mut next = params.clone();
        let (b1, b2): (f64, f64) = (cfg.momentum, 0.999);
        let correction1 = 1.0 - b1.powi(step as i32 + 1);
        let correction2 = 1.0 - b2.powi(step as i32 + 1);
        for (((t, v), s), g) in next
            .tensors_mut()
            .iter_mut()
            .zip(velocity.tensors.iter_mut())
            .zip(second.tensors.iter_mut())
            .zip(&grad.tensors)
        {
            for (((w, vi), si), gi) in t.data.iter_mut().zip(v.iter_mut()).zip(s.iter_mut()).zip(g) {
                match cfg.optimizer {
                    Optimizer::Momentum => {
                        *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                        *w += *vi;
                    }
                    Optimizer::Adam => {
                        *vi = b1 * *vi + (1.0 - b1) * gi;
                        *si = b2 * *si + (1.0 - b2) * gi * gi;
                        let m_hat = *vi / correction1;
                        let s_hat = *si / correction2;
                        *w -= cfg.learning_rate * m_hat / (s_hat.sqrt() + 1e-8);
                    }
                }
            }
        }
        if !next.is_finite() {
            return Err(fail(step, "parameters became non-finite".into(), params, trace));
        }
        params = next;
    }
    Ok(TrainOutcome { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_amplitude, phase_of, stft, StftConfig, Waveform, DEFAULT_AMP_FLOOR};
    use crate::nspp::model::{init_params, ModelArch};
    use std::f64::consts::TAU;

    /// 32 frames of a gliding two-harmonic tone with a decaying envelope.
    fn utterance() -> TrainingExample {
        let cfg = StftConfig::default();
        let len = 31 * cfg.frame_shift;
        let sr = cfg.sample_rate as f64;
        let x: Vec<f64> = (0..len)
            .map(|t| {
                let s = t as f64 / sr;
                let phase = TAU * (150.0 * s + 100.0 * s * s);
                let env = (-3.0 * s).exp() * (1.0 + 0.5 * (TAU * 4.0 * s).sin());
                env * (0.5 * phase.sin() + 0.3 * (2.0 * phase).sin())
            })
            .collect();
        let c = stft(&Waveform::new(x, cfg.sample_rate).unwrap(), &cfg).unwrap();
        assert_eq!(c.frames(), 32);
        TrainingExample::new(log_amplitude(&c, DEFAULT_AMP_FLOOR).unwrap(), phase_of(&c)).unwrap()
    }

    fn small_params(bins: usize) -> ModelParams {
        init_params(&ModelArch::new(bins), 0).unwrap()
    }

    #[test]
    fn overfits_one_utterance() {
        let ex = utterance();
        let out = train(small_params(ex.input.bins()), std::slice::from_ref(&ex), &TrainConfig::default()).unwrap();
        assert_eq!(out.trace.len(), 200);
        let last = *out.trace.last().unwrap();
        assert!(last < 0.5 * out.trace[0], "{} -> {last}", out.trace[0]);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let ex = utterance();
        let params = small_params(ex.input.bins());
        for optimizer in [Optimizer::Adam, Optimizer::Momentum] {
            let cfg = TrainConfig {
                steps: 5,
                learning_rate: 0.0,
                optimizer,
                ..TrainConfig::default()
            };
            let out = train(params.clone(), std::slice::from_ref(&ex), &cfg).unwrap();
            assert_eq!(out.params, params);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let ex = utterance();
        let other = TrainingExample::new(ex.input.map(|v| v * 0.5), ex.target.clone()).unwrap();
        let data = [ex, other];
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            crop_frames: 16,
            seed: 5,
            ..TrainConfig::default()
        };
        let params = small_params(data[0].input.bins());
        let a = train(params.clone(), &data, &cfg).unwrap();
        let b = train(params.clone(), &data, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        let c = train(params, &data, &TrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn divergence_reports_last_good_params() {
        let ex = utterance();
        let params = small_params(ex.input.bins());
        let cfg = TrainConfig {
            steps: 3,
            learning_rate: f64::MAX,
            optimizer: Optimizer::Momentum,
            ..TrainConfig::default()
        };
        let err = train(params.clone(), std::slice::from_ref(&ex), &cfg).unwrap_err();
        assert!(err.step < 3);
        assert!(err.last_good.is_finite());
        assert_eq!(err.trace.len(), err.step);
        assert!(matches!(Error::from(err), Error::NonFinite(_)));
    }

    #[test]
    fn rejects_bad_configs() {
        let ex = utterance();
        let params = small_params(ex.input.bins());
        assert!(train(params.clone(), &[], &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(train(params, std::slice::from_ref(&ex), &cfg).is_err());
    }
}

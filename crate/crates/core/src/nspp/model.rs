//! Residual convolutional phase predictor with parallel real/imaginary heads.
//!
//! ```text
//! log amplitude (F×N) ─ normalize ─ input projection (N→C)
//!     ─ residual blocks: h ← h + tanh(conv_time(h))    (C→C, kernel k, zero padded)
//!     ├─ real head (C→N) ─ R
//!     └─ imag head (C→N) ─ I           phase = atan2(I, R)
//! ```
//!
//! The input is standardized per call (mean and standard deviation over the whole
//! grid), which makes the prediction invariant to the overall gain of the signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::angle;
use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, LogAmpGrid, PhaseGrid, RealGrid};

use super::losses::{weighted_loss, LossBreakdown, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_bins: usize,
    pub channels: usize,
    pub num_blocks: usize,
    pub kernel_time: usize,
}

impl ModelArch {
    /// Desk-scale defaults: 64 channels, 2 residual blocks, kernel 3.
    pub fn new(input_bins: usize) -> Self {
        Self {
            input_bins,
            channels: 64,
            num_blocks: 2,
            kernel_time: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_bins == 0 {
            return Err(invalid("input_bins must be positive"));
        }
        if self.channels < 8 {
            return Err(invalid(format!("channels {} < 8", self.channels)));
        }
        if self.num_blocks < 1 {
            return Err(invalid("at least one residual block is required"));
        }
        if self.kernel_time % 2 == 0 {
            return Err(invalid(format!("kernel_time {} must be odd", self.kernel_time)));
        }
        Ok(())
    }

    /// Tensor names and shapes, in storage order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (n, c, k) = (self.input_bins, self.channels, self.kernel_time);
        let mut layout = vec![
            ("input.weight".to_owned(), vec![c, n]),
            ("input.bias".to_owned(), vec![c]),
        ];
        for b in 0..self.num_blocks {
            layout.push((format!("block{b}.weight"), vec![c, k, c]));
            layout.push((format!("block{b}.bias"), vec![c]));
        }
        layout.push(("head_real.weight".to_owned(), vec![n, c]));
        layout.push(("head_real.bias".to_owned(), vec![n]));
        layout.push(("head_imag.weight".to_owned(), vec![n, c]));
        layout.push(("head_imag.bias".to_owned(), vec![n]));
        layout
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_layout()
            .iter()
            .map(|(_, dims)| dims.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

// indices into ModelParams::tensors
const INPUT_W: usize = 0;
const INPUT_B: usize = 1;
fn block_w(b: usize) -> usize {
    2 + 2 * b
}
fn block_b(b: usize) -> usize {
    3 + 2 * b
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    arch: ModelArch,
    tensors: Vec<Tensor>,
    init_seed: Option<u64>,
}

/// Equality covers the architecture and every tensor; the init seed is provenance only.
impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.tensors == other.tensors
    }
}

/// Deterministic fan-in scaled uniform initialization; biases start at zero.
pub fn init_params(arch: &ModelArch, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .tensor_layout()
        .into_iter()
        .map(|(name, dims)| {
            let len = dims.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                let fan_in: usize = dims[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            Tensor { name, dims, data }
        })
        .collect();
    Ok(ModelParams {
        arch: *arch,
        tensors,
        init_seed: Some(seed),
    })
}

impl ModelParams {
    /// Assembles parameters from tensors, checking names and shapes against `arch`.
    pub fn from_tensors(arch: ModelArch, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.tensor_layout();
        if layout.len() != tensors.len() {
            return Err(invalid(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, dims), t) in layout.iter().zip(&tensors) {
            if &t.name != name || &t.dims != dims {
                return Err(invalid(format!(
                    "tensor {} {:?} does not match expected {name} {dims:?}",
                    t.name, t.dims
                )));
            }
            if t.data.len() != dims.iter().product::<usize>() {
                return Err(invalid(format!("tensor {name} has the wrong payload length")));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
        }
        Ok(Self {
            arch,
            tensors,
            init_seed: None,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn init_seed(&self) -> Option<u64> {
        self.init_seed
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn head_indices(&self) -> [usize; 4] {
        let base = 2 + 2 * self.arch.num_blocks;
        [base, base + 1, base + 2, base + 3]
    }

    /// Copy of the parameters with both output heads (weights and biases) zeroed.
    pub fn with_zero_heads(&self) -> Self {
        let mut out = self.clone();
        for i in self.head_indices() {
            out.tensors[i].data.fill(0.0);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradients laid out like [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    frames: usize,
    /// standardized input, F×N
    x: Vec<f64>,
    /// residual stream entering each block and after the last, (num_blocks+1) × F×C
    streams: Vec<Vec<f64>>,
    /// tanh outputs of each block, num_blocks × F×C
    acts: Vec<Vec<f64>>,
    real: Vec<f64>,
    imag: Vec<f64>,
}

fn standardize(a: &LogAmpGrid) -> Vec<f64> {
    let data = a.data();
    let len = data.len().max(1) as f64;
    let mean = data.iter().sum::<f64>() / len;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
    let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
    data.iter().map(|v| (v - mean) / std).collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn run_forward(params: &ModelParams, input: &LogAmpGrid) -> Result<Trace> {
    let arch = &params.arch;
    if input.bins() != arch.input_bins {
        return Err(invalid(format!(
            "input has {} bins, model expects {}",
            input.bins(),
            arch.input_bins
        )));
    }
    let (frames, n_bins) = input.shape();
    let c = arch.channels;
    let k = arch.kernel_time;
    let half = (k / 2) as isize;
    let t = &params.tensors;
    let x = standardize(input);

    let mut h = vec![0.0; frames * c];
    for f in 0..frames {
        let xf = &x[f * n_bins..(f + 1) * n_bins];
        for ch in 0..c {
            h[f * c + ch] = dot(&t[INPUT_W].data[ch * n_bins..(ch + 1) * n_bins], xf)
                + t[INPUT_B].data[ch];
        }
    }

    let mut streams = Vec::with_capacity(arch.num_blocks + 1);
    let mut acts = Vec::with_capacity(arch.num_blocks);
    for b in 0..arch.num_blocks {
        let w = &t[block_w(b)].data;
        let bias = &t[block_b(b)].data;
        let mut act = vec![0.0; frames * c];
        for f in 0..frames {
            for co in 0..c {
                let mut u = bias[co];
                for j in 0..k {
                    let src = f as isize + j as isize - half;
                    if src < 0 || src >= frames as isize {
                        continue;
                    }
                    let src = src as usize;
                    u += dot(&w[(co * k + j) * c..(co * k + j + 1) * c], &h[src * c..(src + 1) * c]);
                }
                act[f * c + co] = u.tanh();
            }
        }
        let next: Vec<f64> = h.iter().zip(&act).map(|(a, b)| a + b).collect();
        streams.push(std::mem::replace(&mut h, next));
        acts.push(act);
    }
    streams.push(h);

    let [rw, rb, iw, ib] = params.head_indices();
    let top = streams.last().expect("at least one stream");
    let mut real = vec![0.0; frames * n_bins];
    let mut imag = vec![0.0; frames * n_bins];
    for f in 0..frames {
        let hf = &top[f * c..(f + 1) * c];
        for n in 0..n_bins {
            real[f * n_bins + n] = dot(&t[rw].data[n * c..(n + 1) * c], hf) + t[rb].data[n];
            imag[f * n_bins + n] = dot(&t[iw].data[n * c..(n + 1) * c], hf) + t[ib].data[n];
        }
    }

    Ok(Trace {
        frames,
        x,
        streams,
        acts,
        real,
        imag,
    })
}

/// Pseudo real and imaginary parts predicted for every frame and bin.
pub fn forward(params: &ModelParams, input: &LogAmpGrid) -> Result<(RealGrid, RealGrid)> {
    let tr = run_forward(params, input)?;
    let bins = input.bins();
    Ok((
        Grid::new(tr.frames, bins, tr.real)?,
        Grid::new(tr.frames, bins, tr.imag)?,
    ))
}

/// Elementwise four-quadrant angle of `(real, imag)` in (−π, π]; `(0, 0)` maps to 0.
pub fn phase_formula(real: &RealGrid, imag: &RealGrid) -> Result<PhaseGrid> {
    if !real.same_shape(imag) {
        return Err(invalid(format!(
            "real {:?} and imaginary {:?} shapes differ",
            real.shape(),
            imag.shape()
        )));
    }
    let data = real
        .data()
        .iter()
        .zip(imag.data())
        .map(|(&r, &i)| angle(r, i))
        .collect();
    Grid::new(real.frames(), real.bins(), data)
}

/// Predicted wrapped phase for a log amplitude grid.
pub fn predict_phase(params: &ModelParams, input: &LogAmpGrid) -> Result<PhaseGrid> {
    let (r, i) = forward(params, input)?;
    phase_formula(&r, &i)
}

pub fn total_loss(
    params: &ModelParams,
    input: &LogAmpGrid,
    target: &PhaseGrid,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let pred = predict_phase(params, input)?;
    Ok(weighted_loss(&pred, target, weights, false)?.0)
}

/// Loss and reverse-mode gradient of [`total_loss`] with respect to every tensor.
pub fn loss_and_grad(
    params: &ModelParams,
    input: &LogAmpGrid,
    target: &PhaseGrid,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    weights.validate()?;
    let tr = run_forward(params, input)?;
    let arch = &params.arch;
    let (frames, n_bins) = (tr.frames, arch.input_bins);
    let c = arch.channels;
    let k = arch.kernel_time;
    let half = (k / 2) as isize;
    let t = &params.tensors;

    let pred = Grid::new(
        frames,
        n_bins,
        tr.real.iter().zip(&tr.imag).map(|(&r, &i)| angle(r, i)).collect(),
    )?;
    let (loss, g_phase) = weighted_loss(&pred, target, weights, true)?;
    let g_phase = g_phase.expect("gradient requested");

    let mut grads = Gradients::zeros_like(params);

    // d atan2(I, R): dR = −I / (R² + I²), dI = R / (R² + I²); zero at the origin
    let mut g_real = vec![0.0; frames * n_bins];
    let mut g_imag = vec![0.0; frames * n_bins];
    for (idx, &g) in g_phase.data().iter().enumerate() {
        let (r, i) = (tr.real[idx], tr.imag[idx]);
        let m = r * r + i * i;
        if m > 0.0 {
            g_real[idx] = -g * i / m;
            g_imag[idx] = g * r / m;
        }
    }

    let [rw, rb, iw, ib] = params.head_indices();
    let top = tr.streams.last().expect("at least one stream");
    let mut g_h = vec![0.0; frames * c];
    for f in 0..frames {
        let hf = &top[f * c..(f + 1) * c];
        let ghf = &mut g_h[f * c..(f + 1) * c];
        for n in 0..n_bins {
            let gr = g_real[f * n_bins + n];
            let gi = g_imag[f * n_bins + n];
            if gr == 0.0 && gi == 0.0 {
                continue;
            }
            grads.tensors[rb][n] += gr;
            grads.tensors[ib][n] += gi;
            let wr = &t[rw].data[n * c..(n + 1) * c];
            let wi = &t[iw].data[n * c..(n + 1) * c];
            let (dwr, rest) = grads.tensors.split_at_mut(iw);
            let dwr = &mut dwr[rw][n * c..(n + 1) * c];
            let dwi = &mut rest[0][n * c..(n + 1) * c];
            for ch in 0..c {
                dwr[ch] += gr * hf[ch];
                dwi[ch] += gi * hf[ch];
                ghf[ch] += gr * wr[ch] + gi * wi[ch];
            }
        }
    }

    for b in (0..arch.num_blocks).rev() {
        let h_in = &tr.streams[b];
        let act = &tr.acts[b];
        let w = &t[block_w(b)].data;
        // the residual path passes g_h through unchanged
        let g_u: Vec<f64> = g_h
            .iter()
            .zip(act)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let mut g_prev = g_h.clone();
        for f in 0..frames {
            for co in 0..c {
                let gu = g_u[f * c + co];
                if gu == 0.0 {
                    continue;
                }
                grads.tensors[block_b(b)][co] += gu;
                for j in 0..k {
                    let src = f as isize + j as isize - half;
                    if src < 0 || src >= frames as isize {
                        continue;
                    }
                    let src = src as usize;
                    let off = (co * k + j) * c;
                    let dw = &mut grads.tensors[block_w(b)][off..off + c];
                    let hs = &h_in[src * c..(src + 1) * c];
                    let wk = &w[off..off + c];
                    let gp = &mut g_prev[src * c..(src + 1) * c];
                    for ci in 0..c {
                        dw[ci] += gu * hs[ci];
                        gp[ci] += gu * wk[ci];
                    }
                }
            }
        }
        g_h = g_prev;
    }

    for f in 0..frames {
        let xf = &tr.x[f * n_bins..(f + 1) * n_bins];
        for ch in 0..c {
            let g = g_h[f * c + ch];
            if g == 0.0 {
                continue;
            }
            grads.tensors[INPUT_B][ch] += g;
            let dw = &mut grads.tensors[INPUT_W][ch * n_bins..(ch + 1) * n_bins];
            for (d, &xv) in dw.iter_mut().zip(xf) {
                *d += g * xv;
            }
        }
    }

    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((loss, grads))
}

//! Row-major frames × bins containers shared by every stage of the pipeline.

use num_complex::Complex64;

use crate::error::{invalid, Result};

/// A `frames × bins` grid stored row-major (one row per analysis frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    frames: usize,
    bins: usize,
    data: Vec<T>,
}

/// Real-valued grid. Used for log amplitudes, phases and network outputs.
pub type RealGrid = Grid<f64>;
/// Natural log of STFT magnitudes.
pub type LogAmpGrid = Grid<f64>;
/// Wrapped phases in radians, every value in (−π, π].
pub type PhaseGrid = Grid<f64>;
/// One-sided STFT coefficients.
pub type ComplexGrid = Grid<Complex64>;

impl<T: Copy> Grid<T> {
    pub fn new(frames: usize, bins: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(invalid(format!(
                "grid data length {} does not match {frames}×{bins}",
                data.len()
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn filled(frames: usize, bins: usize, value: T) -> Self {
        Self {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }

    pub fn from_fn(frames: usize, bins: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(frames * bins);
        for fr in 0..frames {
            for n in 0..bins {
                data.push(f(fr, n));
            }
        }
        Self { frames, bins, data }
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, frame: usize, bin: usize) -> T {
        self.data[frame * self.bins + bin]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, bin: usize, value: T) {
        self.data[frame * self.bins + bin] = value;
    }

    #[inline]
    pub fn row(&self, frame: usize) -> &[T] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    #[inline]
    pub fn row_mut(&mut self, frame: usize) -> &mut [T] {
        &mut self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.bins.max(1))
    }

    pub fn column(&self, bin: usize) -> Vec<T> {
        (0..self.frames).map(|f| self.get(f, bin)).collect()
    }

    pub fn set_column(&mut self, bin: usize, values: &[T]) {
        debug_assert_eq!(values.len(), self.frames);
        for (f, &v) in values.iter().enumerate() {
            self.set(f, bin, v);
        }
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Keeps the first `frames` rows.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        Self {
            frames,
            bins: self.bins,
            data: self.data[..frames * self.bins].to_vec(),
        }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.frames == other.frames && self.bins == other.bins
    }
}

impl ComplexGrid {
    /// Builds `exp(log_amp) · exp(i·phase)` elementwise.
    pub fn from_polar_log(log_amp: &LogAmpGrid, phase: &PhaseGrid) -> Result<Self> {
        if !log_amp.same_shape(phase) {
            return Err(invalid(format!(
                "log amplitude {:?} and phase {:?} shapes differ",
                log_amp.shape(),
                phase.shape()
            )));
        }
        let data = log_amp
            .data
            .iter()
            .zip(&phase.data)
            .map(|(&a, &p)| Complex64::from_polar(a.exp(), p))
            .collect();
        Grid::new(log_amp.frames, log_amp.bins, data)
    }

    pub fn magnitudes(&self) -> RealGrid {
        self.map(|c| c.norm())
    }
}

//! Long-frame-shift speech phase prediction.
//!
//! Log amplitude spectra at a long frame shift are interpolated frequency-by-frequency
//! to a shorter shift, a small convolutional phase predictor estimates the short-shift
//! phase, and the result is decimated back to the long shift. Iterative phase retrieval
//! (Griffin-Lim, fast Griffin-Lim, RAAR) is provided as a baseline, together with an
//! evaluation harness and file formats used by the `lfs-phase` CLI.

pub mod dsp;
pub mod error;
pub mod grid;
pub mod io;
pub mod nspp;
pub mod pipeline;
pub mod resample;
pub mod retrieval;

pub use error::{Error, FormatError, Result};
pub use grid::{ComplexGrid, Grid, LogAmpGrid, PhaseGrid, RealGrid};

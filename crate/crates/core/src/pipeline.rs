//! End-to-end pipeline: synthetic corpus, training pairs, the systems under
//! comparison, objective metrics and the phase-continuity export.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::dsp::{log_amplitude, phase_of, stft, Stft, StftConfig, Waveform, DEFAULT_AMP_FLOOR};
use crate::error::{invalid, Error, Result};
use crate::grid::{ComplexGrid, Grid, LogAmpGrid, PhaseGrid};
use crate::io::wav_read;
use crate::nspp::{
    iaf_loss, init_params, load_model, predict_phase, save_model, train, ModelArch, ModelParams,
    TrainConfig, TrainOutcome, TrainingExample,
};
use crate::resample::{decimate_grid, interpolate_grid, InterpConfig};
use crate::retrieval::{retrieve, Algorithm, IterAlgoConfig};

/// What goes into each synthetic utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentMix {
    pub min_harmonics: usize,
    pub max_harmonics: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Largest relative f0 change over the utterance (linear glide).
    pub f0_glide: f64,
    /// Attack/release plus slow tremolo; a flat envelope otherwise.
    pub envelope: bool,
    /// Amplitude of the linear chirp relative to the fundamental; 0 disables it.
    pub chirp_level: f64,
    /// White-noise level relative to the signal RMS, in dB; `None` disables it.
    pub noise_db: Option<f64>,
}

impl Default for ComponentMix {
    fn default() -> Self {
        Self {
            min_harmonics: 3,
            max_harmonics: 8,
            f0_min: 80.0,
            f0_max: 300.0,
            f0_glide: 0.2,
            envelope: true,
            chirp_level: 0.3,
            noise_db: Some(-30.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub count: usize,
    pub seconds: f64,
    pub seed: u64,
    pub mix: ComponentMix,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 100,
            seconds: 1.0,
            seed: 1,
            mix: ComponentMix::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let m = &self.mix;
        if self.count == 0 {
            return Err(invalid("corpus must contain at least one utterance"));
        }
        if !(self.seconds >= 0.25 && self.seconds.is_finite()) {
            return Err(invalid(format!("utterance duration {} s is below 0.25 s", self.seconds)));
        }
        if m.min_harmonics == 0 || m.min_harmonics > m.max_harmonics {
            return Err(invalid(format!(
                "harmonic count range {}..={} is empty",
                m.min_harmonics, m.max_harmonics
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(m.f0_min > 0.0 && m.f0_min <= m.f0_max && m.f0_max < nyquist) {
            return Err(invalid(format!("f0 range [{}, {}] Hz is invalid", m.f0_min, m.f0_max)));
        }
        if !(0.0..1.0).contains(&m.f0_glide) || !(m.chirp_level >= 0.0 && m.chirp_level.is_finite()) {
            return Err(invalid("f0_glide must lie in [0, 1) and chirp_level be nonnegative"));
        }
        if m.noise_db.is_some_and(|db| !db.is_finite()) {
            return Err(invalid("noise level must be finite"));
        }
        Ok(())
    }
}

/// One synthetic utterance. Utterance `index` depends only on the seed and the index.
pub fn synth_utterance(spec: &CorpusSpec, index: usize, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let m = &spec.mix;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let sr = sample_rate as f64;
    let len = (spec.seconds * sr).round() as usize;
    let dur = len as f64 / sr;

    let f0 = rng.gen_range(m.f0_min..=m.f0_max);
    let glide = if m.f0_glide > 0.0 {
        rng.gen_range(-m.f0_glide..=m.f0_glide)
    } else {
        0.0
    };
    let harmonics = rng.gen_range(m.min_harmonics..=m.max_harmonics);
    let top_f0 = f0 * (1.0 + glide.abs() / 2.0);
    let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
        .filter(|&h| h == 1 || h as f64 * top_f0 < 0.45 * sr)
        .map(|h| {
            let amp = rng.gen_range(0.3..1.0) / h as f64;
            (h as f64, amp, rng.gen_range(0.0..TAU))
        })
        .collect();
    let fundamental_amp = partials[0].1;

    let (attack, release) = (rng.gen_range(0.01..0.08), rng.gen_range(0.02..0.1));
    let (depth, rate, offset) = (rng.gen_range(0.0..0.5), rng.gen_range(2.0..6.0), rng.gen_range(0.0..TAU));
    let (chirp_lo, chirp_hi) = (rng.gen_range(200.0..3000.0), rng.gen_range(200.0..3000.0));
    let chirp_phase0 = rng.gen_range(0.0..TAU);

    let mut x = Vec::with_capacity(len);
    let mut phi = 0.0;
    for i in 0..len {
        let t = i as f64 / sr;
        let env = if m.envelope {
            (1.0 - (-t / attack).exp())
                * (1.0 - (-(dur - t) / release).exp())
                * (1.0 + depth * (TAU * rate * t + offset).sin())
        } else {
            1.0
        };
        let mut v: f64 = partials.iter().map(|&(h, a, p)| a * (h * phi + p).sin()).sum();
        if m.chirp_level > 0.0 {
            let chirp = TAU * (chirp_lo * t + (chirp_hi - chirp_lo) * t * t / (2.0 * dur)) + chirp_phase0;
            v += m.chirp_level * fundamental_amp * chirp.sin();
        }
        x.push(env * v);
        phi += TAU * f0 * (1.0 + glide * (t / dur - 0.5)) / sr;
    }

    if let Some(db) = m.noise_db {
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        let sigma = rms * 10f64.powf(db / 20.0);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
            for v in &mut x {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let peak = x.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    if peak > 0.0 {
        let gain = 0.9 / peak;
        for v in &mut x {
            *v = (*v * gain).clamp(-0.9, 0.9);
        }
    }
    Waveform::new(x, sample_rate)
}

pub fn synth_corpus(spec: &CorpusSpec, sample_rate: u32) -> Result<Vec<Waveform>> {
    spec.validate(sample_rate)?;
    (0..spec.count)
        .map(|i| synth_utterance(spec, i, sample_rate))
        .collect()
}

/// Every `*.wav` file in `dir`, in file-name order.
pub fn read_wav_dir(dir: &Path, sample_rate: u32) -> Result<Vec<Waveform>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")));
    paths.sort();
    if paths.is_empty() {
        return Err(invalid(format!("no .wav files in {}", dir.display())));
    }
    paths.iter().map(|p| wav_read(p, Some(sample_rate))).collect()
}

/// Log amplitude and phase of one analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub las: LogAmpGrid,
    pub phase: PhaseGrid,
}

pub fn features(x: &Waveform, cfg: &StftConfig) -> Result<Features> {
    let c = stft(x, cfg)?;
    Ok(Features {
        las: log_amplitude(&c, DEFAULT_AMP_FLOOR)?,
        phase: phase_of(&c),
    })
}

/// Network input used for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSource {
    /// Long-shift amplitudes interpolated to the short shift; short-shift phase target.
    #[default]
    Interpolated,
    /// Natural short-shift amplitudes and phase.
    NaturalSfs,
    /// Long-shift amplitudes and phase, no interpolation.
    Lfs,
}

impl FromStr for InputSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interpolated" => Ok(Self::Interpolated),
            "natural-sfs" => Ok(Self::NaturalSfs),
            "lfs" => Ok(Self::Lfs),
            other => Err(invalid(format!("unknown input source {other:?}"))),
        }
    }
}

/// Training input and target for one utterance. `cfg` is the long-shift analysis;
/// for the short-shift sources the frame counts are equalized by truncation.
pub fn build_training_pair(
    x: &Waveform,
    cfg: &StftConfig,
    interp: &InterpConfig,
    source: InputSource,
) -> Result<TrainingExample> {
    if x.len() < cfg.frame_shift {
        return Err(invalid(format!(
            "{} samples give fewer than 2 frames at shift {}",
            x.len(),
            cfg.frame_shift
        )));
    }
    if source == InputSource::Lfs {
        let f = features(x, cfg)?;
        return TrainingExample::new(f.las, f.phase);
    }
    let short_cfg = cfg.with_shift_divided(interp.ratio)?;
    let short = features(x, &short_cfg)?;
    let input = match source {
        InputSource::Interpolated => interpolate_grid(&features(x, cfg)?.las, interp)?,
        _ => short.las,
    };
    let frames = input.frames().min(short.phase.frames());
    TrainingExample::new(input.truncated(frames), short.phase.truncated(frames))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub channels: usize,
    pub num_blocks: usize,
    pub kernel_time: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let a = ModelArch::new(1);
        Self {
            channels: a.channels,
            num_blocks: a.num_blocks,
            kernel_time: a.kernel_time,
        }
    }
}

impl ModelSpec {
    pub fn arch(&self, input_bins: usize) -> ModelArch {
        ModelArch {
            input_bins,
            channels: self.channels,
            num_blocks: self.num_blocks,
            kernel_time: self.kernel_time,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Where trained models are cached by `evaluate`.
    pub model_dir: Option<PathBuf>,
    /// Training WAVs; the synthetic corpus is used when absent.
    pub train_wav_dir: Option<PathBuf>,
    /// Test WAVs; the synthetic test corpus is used when absent.
    pub test_wav_dir: Option<PathBuf>,
}

/// Everything an experiment needs, loadable from one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Long-shift analysis.
    pub stft: StftConfig,
    pub interp: InterpConfig,
    pub model: ModelSpec,
    /// `crop_frames` counts long-shift frames; short-shift training scales it by the ratio.
    pub train: TrainConfig,
    pub init_seed: u64,
    pub input_source: InputSource,
    pub corpus: CorpusSpec,
    pub test_corpus: CorpusSpec,
    pub baseline: IterAlgoConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            interp: InterpConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            init_seed: 0,
            input_source: InputSource::Interpolated,
            corpus: CorpusSpec::default(),
            test_corpus: CorpusSpec {
                count: 20,
                seed: 1_000_001,
                ..CorpusSpec::default()
            },
            baseline: IterAlgoConfig::new(Algorithm::Raar, 100),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.interp.validate()?;
        self.train.validate()?;
        self.baseline.validate()?;
        self.model.arch(self.stft.bins()).validate()?;
        if self.stft.frame_shift % self.interp.ratio != 0 {
            return Err(invalid(format!(
                "long shift {} is not a multiple of the ratio {}",
                self.stft.frame_shift, self.interp.ratio
            )));
        }
        if 2 * self.stft.frame_shift > self.stft.frame_length {
            return Err(invalid(format!(
                "long shift {} exceeds half the frame length {}",
                self.stft.frame_shift, self.stft.frame_length
            )));
        }
        if self.paths.train_wav_dir.is_none() {
            self.corpus.validate(self.stft.sample_rate)?;
        }
        if self.paths.test_wav_dir.is_none() {
            self.test_corpus.validate(self.stft.sample_rate)?;
        }
        if self.paths.train_wav_dir.is_none()
            && self.paths.test_wav_dir.is_none()
            && self.corpus.seed == self.test_corpus.seed
        {
            return Err(invalid("training and test corpora share a seed"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn short_stft(&self) -> Result<StftConfig> {
        self.stft.with_shift_divided(self.interp.ratio)
    }

    pub fn training_corpus(&self) -> Result<Vec<Waveform>> {
        match &self.paths.train_wav_dir {
            Some(dir) => read_wav_dir(dir, self.stft.sample_rate),
            None => synth_corpus(&self.corpus, self.stft.sample_rate),
        }
    }

    pub fn test_set(&self) -> Result<Vec<Waveform>> {
        match &self.paths.test_wav_dir {
            Some(dir) => read_wav_dir(dir, self.stft.sample_rate),
            None => synth_corpus(&self.test_corpus, self.stft.sample_rate),
        }
    }

    /// The configuration that trains `variant`.
    pub fn for_variant(&self, variant: ModelVariant) -> Self {
        let mut cfg = self.clone();
        cfg.input_source = variant.source;
        cfg.interp.ratio = variant.ratio;
        if variant.source != InputSource::Lfs {
            cfg.train.crop_frames *= variant.ratio;
        }
        cfg
    }
}

/// Trains the phase predictor on `corpus` with `cfg.input_source` inputs.
pub fn train_pipeline(cfg: &ExperimentConfig, corpus: &[Waveform]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = corpus
        .iter()
        .map(|x| build_training_pair(x, &cfg.stft, &cfg.interp, cfg.input_source))
        .collect::<Result<Vec<_>>>()?;
    let params = init_params(&cfg.model.arch(cfg.stft.bins()), cfg.init_seed)?;
    Ok(train(params, &data, &cfg.train)?)
}

/// Writes a loss trace as `step,loss` CSV.
pub fn write_trace(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["step", "loss"]).map_err(csv_error)?;
    for (step, loss) in trace.iter().enumerate() {
        w.serialize((step, loss)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Interpolation, prediction at the short shift, decimation.
pub fn lfs_nspp_predict(las: &LogAmpGrid, model: &ModelParams, interp: &InterpConfig) -> Result<PhaseGrid> {
    let dense = interpolate_grid(las, interp)?;
    decimate_grid(&predict_phase(model, &dense)?, interp.ratio)
}

/// Rows `0, D, 2D, …` of a short-shift grid, for the first `frames` long-shift frames.
///
/// Unlike [`decimate_grid`] this accepts the `D·(F − 1) + 1 …` frames a natural
/// short-shift analysis produces.
pub fn select_long_frames<T: Copy>(short: &Grid<T>, ratio: usize, frames: usize) -> Result<Grid<T>> {
    if ratio == 0 || frames > 0 && (frames - 1) * ratio >= short.frames() {
        return Err(invalid(format!(
            "{} short frames cannot supply {frames} long frames at ratio {ratio}",
            short.frames()
        )));
    }
    Ok(Grid::from_fn(frames, short.bins(), |f, n| short.get(f * ratio, n)))
}

/// `istft(exp(A)·e^{iP})`; `length` defaults to the shortest signal with `A`'s frame count.
pub fn reconstruct(
    las: &LogAmpGrid,
    phase: &PhaseGrid,
    cfg: &StftConfig,
    length: Option<usize>,
) -> Result<Waveform> {
    let c = ComplexGrid::from_polar_log(las, phase)?;
    let length = length.unwrap_or(las.frames().saturating_sub(1) * cfg.frame_shift);
    let samples = if length == 0 {
        Vec::new()
    } else {
        Stft::new(cfg)?.synthesize(&c, length)?
    };
    Waveform::new(samples, cfg.sample_rate)
}

/// Identifies a trained predictor: what it was trained on and at which ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelVariant {
    pub source: InputSource,
    pub ratio: usize,
}

impl ModelVariant {
    pub fn file_name(&self) -> String {
        match self.source {
            InputSource::Interpolated => format!("interpolated-d{}.nsp", self.ratio),
            InputSource::NaturalSfs => format!("natural-sfs-d{}.nsp", self.ratio),
            InputSource::Lfs => "lfs.nsp".to_owned(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    /// Interpolate, predict with a model trained on interpolated input, decimate.
    LfsNspp { ratio: usize },
    /// As `LfsNspp` with a model trained on natural short-shift amplitudes.
    LfsNsppStar { ratio: usize },
    /// Predict directly at the long shift.
    Nspp,
    /// The natural-input model applied to natural short-shift amplitudes, decimated.
    NsppShort { ratio: usize },
    /// Iterative retrieval at the long shift.
    Iterative(Algorithm),
    /// Iterative retrieval on interpolated amplitudes at the short shift, decimated.
    LfsIterative { algorithm: Algorithm, ratio: usize },
    /// The natural phase, as an upper bound.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystemSpec {
    pub name: String,
    pub kind: SystemKind,
}

impl SystemSpec {
    /// Parses a system name. `ratio` is the configured ratio used by names without a
    /// `-d<N>` suffix.
    ///
    /// Names: `lfs-nspp`, `lfs-nspp-d<N>`, `lfs-nspp-star`, `nspp`, `nspp-5ms`,
    /// `gla`, `fastgla`, `raar`, `lfs-gla`, `lfs-fastgla`, `lfs-raar`, `oracle`.
    pub fn parse(name: &str, ratio: usize) -> Result<Self> {
        let kind = match name {
            "lfs-nspp" => SystemKind::LfsNspp { ratio },
            "lfs-nspp-star" => SystemKind::LfsNsppStar { ratio },
            "nspp" => SystemKind::Nspp,
            "nspp-5ms" => SystemKind::NsppShort { ratio },
            "oracle" => SystemKind::Oracle,
            _ => {
                if let Some(d) = name.strip_prefix("lfs-nspp-d") {
                    let ratio = d
                        .parse()
                        .ok()
                        .filter(|&d: &usize| d >= 1)
                        .ok_or_else(|| invalid(format!("bad ratio in system name {name:?}")))?;
                    SystemKind::LfsNspp { ratio }
                } else if let Some(algo) = name.strip_prefix("lfs-") {
                    SystemKind::LfsIterative {
                        algorithm: algo.parse()?,
                        ratio,
                    }
                } else {
                    SystemKind::Iterative(
                        name.parse()
                            .map_err(|_| invalid(format!("unknown system {name:?}")))?,
                    )
                }
            }
        };
        Ok(Self {
            name: name.to_owned(),
            kind,
        })
    }

    pub fn parse_list(list: &str, ratio: usize) -> Result<Vec<Self>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Self::parse(s, ratio))
            .collect()
    }

    /// The trained model this system needs, if any.
    pub fn model_variant(&self) -> Option<ModelVariant> {
        match self.kind {
            SystemKind::LfsNspp { ratio } => Some(ModelVariant {
                source: InputSource::Interpolated,
                ratio,
            }),
            SystemKind::LfsNsppStar { ratio } | SystemKind::NsppShort { ratio } => Some(ModelVariant {
                source: InputSource::NaturalSfs,
                ratio,
            }),
            SystemKind::Nspp => Some(ModelVariant {
                source: InputSource::Lfs,
                ratio: 1,
            }),
            _ => None,
        }
    }
}

/// Averaged objective metrics of one system over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub system: String,
    /// Mean IAF loss between predicted and natural long-shift phase, in radians.
    pub iaf: f64,
    pub spectral_convergence: f64,
    pub snr_db: f64,
    /// Generation time over audio duration.
    pub rtf: f64,
    pub n_utts: usize,
}

impl MetricsRecord {
    /// Equality of everything except the timing.
    pub fn same_quality(&self, other: &Self) -> bool {
        self.system == other.system
            && self.iaf == other.iaf
            && self.spectral_convergence == other.spectral_convergence
            && self.snr_db == other.snr_db
            && self.n_utts == other.n_utts
    }
}

/// A test utterance with its natural long-shift features.
#[derive(Clone, Debug)]
pub struct TestUtterance {
    pub wave: Waveform,
    pub natural: Features,
}

pub fn prepare_test_set(test: &[Waveform], cfg: &StftConfig) -> Result<Vec<TestUtterance>> {
    test.iter()
        .map(|w| {
            Ok(TestUtterance {
                natural: features(w, cfg)?,
                wave: w.clone(),
            })
        })
        .collect()
}

/// SNR in dB, capped at 300 dB for identical signals.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    10.0 * (signal / noise.max(signal * 1e-30).max(f64::MIN_POSITIVE)).log10()
}

/// `‖|S_est| − |S_ref|‖_F / ‖|S_ref|‖_F`.
pub fn spectral_convergence(reference: &ComplexGrid, estimate: &ComplexGrid) -> Result<f64> {
    if !reference.same_shape(estimate) {
        return Err(invalid("spectrogram shapes differ"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (r, e) in reference.data().iter().zip(estimate.data()) {
        let d = e.norm() - r.norm();
        num += d * d;
        den += r.norm_sqr();
    }
    if den == 0.0 {
        return Err(invalid("reference spectrogram is silent"));
    }
    Ok((num / den).sqrt())
}

/// Mean over frames of the RMS (over bins) of the dB difference of two waveforms'
/// amplitude spectra.
pub fn log_spectral_distance(reference: &Waveform, estimate: &Waveform, cfg: &StftConfig) -> Result<f64> {
    let r = stft(reference, cfg)?;
    let e = stft(estimate, cfg)?;
    let frames = r.frames().min(e.frames());
    let eps = 1e-8;
    let mut total = 0.0;
    for f in 0..frames {
        let ms: f64 = r
            .row(f)
            .iter()
            .zip(e.row(f))
            .map(|(a, b)| {
                let d = 20.0 * ((a.norm() + eps) / (b.norm() + eps)).log10();
                d * d
            })
            .sum::<f64>()
            / r.bins() as f64;
        total += ms.sqrt();
    }
    Ok(total / frames as f64)
}

/// Scores a phase estimator. `estimate` maps an utterance to its long-shift phase; the
/// time spent in it plus waveform synthesis counts towards the RTF.
pub fn evaluate_with(
    system: &str,
    test: &[TestUtterance],
    cfg: &StftConfig,
    mut estimate: impl FnMut(&TestUtterance) -> Result<PhaseGrid>,
) -> Result<MetricsRecord> {
    if test.is_empty() {
        return Err(invalid("empty test set"));
    }
    let (mut iaf, mut sc, mut snr) = (0.0, 0.0, 0.0);
    let (mut seconds, mut audio) = (0.0, 0.0);
    for utt in test {
        let start = Instant::now();
        let phase = estimate(utt)?;
        if !phase.same_shape(&utt.natural.phase) {
            return Err(invalid(format!(
                "{system}: predicted phase {:?} differs from the natural shape {:?}",
                phase.shape(),
                utt.natural.phase.shape()
            )));
        }
        let rec = reconstruct(&utt.natural.las, &phase, cfg, Some(utt.wave.len()))?;
        seconds += start.elapsed().as_secs_f64();
        audio += utt.wave.duration_seconds();

        iaf += iaf_loss(&phase, &utt.natural.phase)?;
        sc += spectral_convergence(&stft(&utt.wave, cfg)?, &stft(&rec, cfg)?)?;
        snr += snr_db(utt.wave.samples(), rec.samples());
    }
    let n = test.len() as f64;
    let record = MetricsRecord {
        system: system.to_owned(),
        iaf: iaf / n,
        spectral_convergence: sc / n,
        snr_db: snr / n,
        rtf: (seconds / audio).max(f64::MIN_POSITIVE),
        n_utts: test.len(),
    };
    if ![record.iaf, record.spectral_convergence, record.snr_db, record.rtf]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite(format!("{system}: non-finite metrics {record:?}")));
    }
    Ok(record)
}

/// Scores `system` on `test`. Model-based systems need `model`.
pub fn evaluate(
    system: &SystemSpec,
    model: Option<&ModelParams>,
    test: &[TestUtterance],
    cfg: &ExperimentConfig,
) -> Result<MetricsRecord> {
    let need_model = || {
        model.ok_or_else(|| invalid(format!("system {} needs a trained model", system.name)))
    };
    let long = cfg.stft;
    let interp_for = |ratio| InterpConfig {
        ratio,
        ..cfg.interp
    };
    match system.kind {
        SystemKind::LfsNspp { ratio } | SystemKind::LfsNsppStar { ratio } => {
            let model = need_model()?;
            let interp = interp_for(ratio);
            evaluate_with(&system.name, test, &long, |u| lfs_nspp_predict(&u.natural.las, model, &interp))
        }
        SystemKind::Nspp => {
            let model = need_model()?;
            evaluate_with(&system.name, test, &long, |u| predict_phase(model, &u.natural.las))
        }
        SystemKind::NsppShort { ratio } => {
            let model = need_model()?;
            let short = long.with_shift_divided(ratio)?;
            evaluate_with(&system.name, test, &long, |u| {
                let las = features(&u.wave, &short)?.las;
                select_long_frames(&predict_phase(model, &las)?, ratio, u.natural.phase.frames())
            })
        }
        SystemKind::Iterative(algorithm) => {
            let acfg = IterAlgoConfig {
                algorithm,
                ..cfg.baseline
            };
            evaluate_with(&system.name, test, &long, |u| {
                Ok(retrieve(&u.natural.las.map(f64::exp), &long, &acfg)?.phase)
            })
        }
        SystemKind::LfsIterative { algorithm, ratio } => {
            let acfg = IterAlgoConfig {
                algorithm,
                ..cfg.baseline
            };
            let interp = interp_for(ratio);
            evaluate_with(&system.name, test, &long, |u| {
                crate::retrieval::lfs_wrap(
                    crate::retrieval::Estimator::Iterative(acfg),
                    &u.natural.las,
                    &interp,
                    &long,
                )
            })
        }
        SystemKind::Oracle => evaluate_with(&system.name, test, &long, |u| Ok(u.natural.phase.clone())),
    }
}

/// Loads `variant` from `cfg.paths.model_dir` or trains it (and caches it there).
pub fn ensure_model(cfg: &ExperimentConfig, variant: ModelVariant, corpus: &[Waveform]) -> Result<ModelParams> {
    let cached = cfg.paths.model_dir.as_ref().map(|d| d.join(variant.file_name()));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        return load_model(path);
    }
    let outcome = train_pipeline(&cfg.for_variant(variant), corpus)?;
    if let Some(path) = cached {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        save_model(&outcome.params, &path)?;
    }
    Ok(outcome.params)
}

/// Trains (or loads) whatever `systems` need and scores each on the configured test set.
pub fn run_evaluation(cfg: &ExperimentConfig, systems: &[SystemSpec]) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let test = prepare_test_set(&cfg.test_set()?, &cfg.stft)?;
    let needs_corpus = systems.iter().any(|s| s.model_variant().is_some());
    let corpus = if needs_corpus {
        cfg.training_corpus()?
    } else {
        Vec::new()
    };
    let mut models: Vec<(ModelVariant, ModelParams)> = Vec::new();
    let mut out = Vec::with_capacity(systems.len());
    for system in systems {
        let model = match system.model_variant() {
            Some(variant) => {
                if !models.iter().any(|(v, _)| *v == variant) {
                    models.push((variant, ensure_model(cfg, variant, &corpus)?));
                }
                models.iter().find(|(v, _)| *v == variant).map(|(_, m)| m)
            }
            None => None,
        };
        out.push(evaluate(system, model, &test, cfg)?);
    }
    Ok(out)
}

pub fn write_metrics_jsonl(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub shift: usize,
    pub frame: usize,
    pub phase: f64,
}

/// Phase trajectory of one bin for each frame shift in `shifts`.
pub fn phase_continuity_export(
    x: &Waveform,
    bin: usize,
    shifts: &[usize],
    base: &StftConfig,
) -> Result<Vec<ContinuityRow>> {
    if bin >= base.bins() {
        return Err(invalid(format!("bin {bin} out of range (0..{})", base.bins())));
    }
    let mut rows = Vec::new();
    for &shift in shifts {
        if shift == 0 || shift > base.frame_length {
            return Err(invalid(format!(
                "shift {shift} must lie in [1, frame_length = {}]",
                base.frame_length
            )));
        }
        let cfg = StftConfig {
            frame_shift: shift,
            ..*base
        };
        let phase = phase_of(&stft(x, &cfg)?);
        rows.extend((0..phase.frames()).map(|frame| ContinuityRow {
            shift,
            frame,
            phase: phase.get(frame, bin),
        }));
    }
    Ok(rows)
}

pub fn write_continuity_csv(path: impl AsRef<Path>, rows: &[ContinuityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn spec(count: usize, seconds: f64) -> CorpusSpec {
        CorpusSpec {
            count,
            seconds,
            seed: 7,
            mix: ComponentMix::default(),
        }
    }

    #[test]
    fn corpus_is_deterministic_and_normalized() {
        let a = synth_corpus(&spec(4, 0.3), 16_000).unwrap();
        let b = synth_corpus(&spec(4, 0.3), 16_000).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 4800);
        for w in &a {
            let peak = w.samples().iter().fold(0.0f64, |p, v| p.max(v.abs()));
            assert!(peak <= 0.9 && peak > 0.899);
        }
        assert_ne!(a[0], a[1]);
        // utterance i does not depend on the corpus size
        assert_eq!(synth_utterance(&spec(1, 0.3), 2, 16_000).unwrap(), a[2]);
        assert!(synth_corpus(&spec(0, 0.3), 16_000).is_err());
        assert!(synth_corpus(&spec(1, 0.2), 16_000).is_err());
    }

    #[test]
    fn single_harmonic_peaks_at_f0() {
        let cfg = StftConfig::default();
        for seed in 0..5 {
            let s = CorpusSpec {
                count: 1,
                seconds: 0.5,
                seed,
                mix: ComponentMix {
                    min_harmonics: 1,
                    max_harmonics: 1,
                    f0_glide: 0.0,
                    ..ComponentMix::default()
                },
            };
            let x = synth_utterance(&s, 0, 16_000).unwrap();
            // the generator draws f0 first from the utterance stream
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0);
            let f0: f64 = rng.gen_range(80.0..=300.0);
            let c = stft(&x, &cfg).unwrap();
            let mut power = vec![0.0; c.bins()];
            for row in c.rows() {
                for (p, z) in power.iter_mut().zip(row) {
                    *p += z.norm_sqr();
                }
            }
            let argmax = (0..power.len()).max_by(|&i, &j| power[i].total_cmp(&power[j])).unwrap();
            let expected = (f0 * 1024.0 / 16_000.0).round() as i64;
            assert!((argmax as i64 - expected).abs() <= 1, "seed {seed}: {argmax} vs {expected}");
        }
    }

    #[test]
    fn training_pair_shapes() {
        let cfg = StftConfig::default();
        let interp = InterpConfig::default();
        let x = synth_utterance(&spec(1, 0.5), 0, 16_000).unwrap();
        let long = features(&x, &cfg).unwrap();
        let pair = build_training_pair(&x, &cfg, &interp, InputSource::Interpolated).unwrap();
        let short_frames = cfg.with_shift_divided(2).unwrap().frame_count(x.len());
        assert_eq!(pair.input.frames(), (2 * long.las.frames()).min(short_frames));
        assert!(pair.target.data().iter().all(|p| *p > -PI && *p <= PI));
        for f in 0..long.las.frames() {
            if 2 * f < pair.input.frames() {
                assert_eq!(pair.input.row(2 * f), long.las.row(f));
            }
        }
        let lfs = build_training_pair(&x, &cfg, &interp, InputSource::Lfs).unwrap();
        assert_eq!(lfs.input, long.las);
        assert_eq!(lfs.target, long.phase);
        let nat = build_training_pair(&x, &cfg, &interp, InputSource::NaturalSfs).unwrap();
        assert_eq!(nat.target, pair.target);

        let short = Waveform::new(vec![0.1; 100], 16_000).unwrap();
        assert!(build_training_pair(&short, &cfg, &interp, InputSource::Interpolated).is_err());
    }

    #[test]
    fn decimated_natural_phase_is_natural_long_phase() {
        let cfg = StftConfig::default();
        let x = synth_utterance(&spec(1, 0.5), 3, 16_000).unwrap();
        let long = features(&x, &cfg).unwrap();
        let short = features(&x, &cfg.with_shift_divided(2).unwrap()).unwrap();
        let dec = select_long_frames(&short.phase, 2, long.phase.frames()).unwrap();
        assert_eq!(dec, long.phase);
        assert!(select_long_frames(&short.phase, 2, long.phase.frames() + 1).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let cfg = StftConfig::default();
        let x = synth_utterance(&spec(1, 0.5), 1, 16_000).unwrap();
        let f = features(&x, &cfg).unwrap();
        let rec = reconstruct(&f.las, &f.phase, &cfg, Some(x.len())).unwrap();
        let natural = snr_db(x.samples(), rec.samples());
        assert!(natural > 60.0, "{natural}");
        let zero_phase = f.phase.map(|_| 0.0);
        let rec0 = reconstruct(&f.las, &zero_phase, &cfg, Some(x.len())).unwrap();
        assert!(rec0.samples().iter().all(|v| v.is_finite()));
        assert!(snr_db(x.samples(), rec0.samples()) < natural - 40.0);

        let silent = f.las.map(|_| f64::NEG_INFINITY);
        let rec = reconstruct(&silent, &f.phase, &cfg, None).unwrap();
        assert_eq!(rec.len(), (f.las.frames() - 1) * cfg.frame_shift);
        assert!(rec.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_evaluation() {
        let cfg = ExperimentConfig::default();
        let test = prepare_test_set(&synth_corpus(&spec(2, 0.3), 16_000).unwrap(), &cfg.stft).unwrap();
        let oracle = SystemSpec::parse("oracle", 2).unwrap();
        let m = evaluate(&oracle, None, &test, &cfg).unwrap();
        assert_eq!(m.iaf, 0.0);
        assert!(m.snr_db > 60.0);
        assert!(m.spectral_convergence < 1e-6);
        assert!(m.rtf > 0.0);
        assert_eq!(m.n_utts, 2);
        assert!(evaluate(&oracle, None, &[], &cfg).is_err());
        assert!(evaluate(&SystemSpec::parse("nspp", 2).unwrap(), None, &test, &cfg).is_err());
    }

    #[test]
    fn system_names() {
        let parse = |s| SystemSpec::parse(s, 2).unwrap().kind;
        assert_eq!(parse("lfs-nspp"), SystemKind::LfsNspp { ratio: 2 });
        assert_eq!(parse("lfs-nspp-d4"), SystemKind::LfsNspp { ratio: 4 });
        assert_eq!(parse("lfs-nspp-star"), SystemKind::LfsNsppStar { ratio: 2 });
        assert_eq!(parse("nspp"), SystemKind::Nspp);
        assert_eq!(parse("raar"), SystemKind::Iterative(Algorithm::Raar));
        assert_eq!(
            parse("lfs-fastgla"),
            SystemKind::LfsIterative {
                algorithm: Algorithm::FastGla,
                ratio: 2
            }
        );
        assert!(SystemSpec::parse("admm", 2).is_err());
        assert!(SystemSpec::parse("lfs-nspp-d0", 2).is_err());
        assert_eq!(SystemSpec::parse_list("nspp, oracle,", 2).unwrap().len(), 2);
    }

    #[test]
    fn config_json_and_invariants() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_json(r#"{"interp": {"ratio": 4}}"#).unwrap();
        assert_eq!(partial.short_stft().unwrap().frame_shift, 40);
        assert!(ExperimentConfig::from_json(r#"{"interp": {"ratio": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"stft": {"frame_shift": 200}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"test_corpus": {"seed": 1}}"#).is_err());
    }

    #[test]
    fn continuity_of_an_on_bin_tone() {
        let cfg = StftConfig::default();
        // bin 32 of a 1024-point FFT at 16 kHz is 500 Hz
        let f = 500.0;
        let x: Vec<f64> = (0..8000).map(|t| 0.5 * (TAU * f * t as f64 / 16_000.0).cos()).collect();
        let x = Waveform::new(x, 16_000).unwrap();
        let shifts = [40, 80, 160];
        let rows = phase_continuity_export(&x, 32, &shifts, &cfg).unwrap();
        let expected_rows: usize = shifts.iter().map(|&s| 8000 / s + 1).sum();
        assert_eq!(rows.len(), expected_rows);
        assert!(rows.iter().all(|r| r.phase > -PI && r.phase <= PI));
        for &shift in &shifts {
            let traj: Vec<f64> = rows.iter().filter(|r| r.shift == shift).map(|r| r.phase).collect();
            let advance = TAU * f * shift as f64 / 16_000.0;
            // away from the reflected edges, consecutive frames advance by 2π·f·shift/sr
            let margin = 320 / shift + 1;
            for w in traj[margin..traj.len() - margin].windows(2) {
                assert!(crate::nspp::anti_wrap(w[1] - w[0] - advance) < 1e-6, "shift {shift}");
            }
        }
        assert!(phase_continuity_export(&x, 513, &shifts, &cfg).is_err());
        assert!(phase_continuity_export(&x, 3, &[400], &cfg).is_err());
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lfs_phase::dsp::{StftConfig, Waveform};
use lfs_phase::io::{grid_read, grid_write, wav_read, wav_write, GridFile, GridKind};
use lfs_phase::nspp::{load_model, predict_phase, save_model};
use lfs_phase::pipeline::{
    features, lfs_nspp_predict, phase_continuity_export, reconstruct, run_evaluation, synth_corpus,
    train_pipeline, write_continuity_csv, write_metrics_jsonl, write_trace, CorpusSpec,
    ExperimentConfig, InputSource, SystemSpec,
};
use lfs_phase::resample::InterpConfig;
use lfs_phase::retrieval::{estimate_direct, lfs_wrap, Algorithm, Estimator, IterAlgoConfig};
use lfs_phase::{Error, Result};

#[derive(Parser)]
#[command(name = "lfs-phase", version, about = "Long-frame-shift phase prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of WAV files.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seconds: f64,
        #[arg(long)]
        seed: u64,
        /// Takes the sample rate and component mix from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Extract long-shift log amplitude and phase grids from a WAV file.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "out-las")]
        out_las: PathBuf,
        #[arg(long = "out-phase")]
        out_phase: PathBuf,
    },
    /// Train a phase predictor; the loss trace goes next to the model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "input-source", value_parser = parse_source)]
        input_source: Option<InputSource>,
        /// Loss trace CSV; defaults to `<out>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Predict long-shift phase from a log amplitude grid.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        las: PathBuf,
        #[arg(long, default_value_t = 2)]
        ratio: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative phase retrieval baseline.
    Baseline {
        #[arg(long, value_parser = parse_algo)]
        algo: Algorithm,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Run at the shorter shift on interpolated amplitudes and decimate.
        #[arg(long)]
        lfs: bool,
        #[arg(long, default_value_t = 2)]
        ratio: usize,
        #[arg(long)]
        las: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Synthesize a waveform from log amplitude and phase grids.
    Reconstruct {
        #[arg(long)]
        las: PathBuf,
        #[arg(long)]
        phase: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output length in samples; defaults to `(frames − 1) · shift`.
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Train or load the needed models and write one metrics line per system.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated, e.g. `lfs-nspp,nspp,lfs-nspp-star,raar,oracle`.
        #[arg(long)]
        systems: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-shift phase trajectories of one bin as CSV.
    Continuity {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        bin: usize,
        #[arg(long, value_delimiter = ',', default_value = "40,80,160")]
        shifts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
}

#[derive(Args)]
struct AnalysisArgs {
    /// Experiment config supplying the STFT settings; the defaults are used otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl AnalysisArgs {
    fn stft(&self) -> Result<StftConfig> {
        Ok(load_config(self.config.as_deref())?.stft)
    }
}

fn parse_source(s: &str) -> std::result::Result<InputSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_algo(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_grid(path: &Path, kind: GridKind) -> Result<lfs_phase::RealGrid> {
    grid_read(path)?.into_real(kind)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus {
            out,
            count,
            seconds,
            seed,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let spec = CorpusSpec {
                count,
                seconds,
                seed,
                mix: cfg.corpus.mix,
            };
            std::fs::create_dir_all(&out)?;
            for (i, w) in synth_corpus(&spec, cfg.stft.sample_rate)?.iter().enumerate() {
                wav_write(out.join(format!("utt_{i:04}.wav")), w)?;
            }
        }
        Command::Features {
            wav,
            config,
            out_las,
            out_phase,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let f = features(&wav_read(&wav, Some(cfg.stft.sample_rate))?, &cfg.stft)?;
            grid_write(&out_las, &GridFile::LogAmplitude(f.las))?;
            grid_write(&out_phase, &GridFile::Phase(f.phase))?;
        }
        Command::Train {
            config,
            out,
            input_source,
            trace,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(source) = input_source {
                cfg.input_source = source;
            }
            let outcome = train_pipeline(&cfg, &cfg.training_corpus()?)?;
            save_model(&outcome.params, &out)?;
            let trace = trace.unwrap_or_else(|| {
                let mut name = out.clone().into_os_string();
                name.push(".trace.csv");
                name.into()
            });
            write_trace(trace, &outcome.trace)?;
        }
        Command::Predict {
            model,
            las,
            ratio,
            out,
        } => {
            let params = load_model(&model)?;
            let las = read_grid(&las, GridKind::LogAmplitude)?;
            let phase = if ratio == 1 {
                predict_phase(&params, &las)?
            } else {
                lfs_nspp_predict(&las, &params, &InterpConfig::with_ratio(ratio))?
            };
            grid_write(&out, &GridFile::Phase(phase))?;
        }
        Command::Baseline {
            algo,
            iters,
            lfs,
            ratio,
            las,
            out,
            analysis,
        } => {
            let cfg = analysis.stft()?;
            let las = read_grid(&las, GridKind::LogAmplitude)?;
            let est = Estimator::Iterative(IterAlgoConfig::new(algo, iters));
            let phase = if lfs {
                lfs_wrap(est, &las, &InterpConfig::with_ratio(ratio), &cfg)?
            } else {
                estimate_direct(est, &las, &cfg)?
            };
            grid_write(&out, &GridFile::Phase(phase))?;
        }
        Command::Reconstruct {
            las,
            phase,
            out,
            samples,
            analysis,
        } => {
            let cfg = analysis.stft()?;
            let las = read_grid(&las, GridKind::LogAmplitude)?;
            let phase = read_grid(&phase, GridKind::Phase)?;
            let wave: Waveform = reconstruct(&las, &phase, &cfg, samples)?;
            wav_write(&out, &wave)?;
        }
        Command::Evaluate {
            config,
            systems,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let systems = SystemSpec::parse_list(&systems, cfg.interp.ratio)?;
            let records = run_evaluation(&cfg, &systems)?;
            write_metrics_jsonl(&out, &records)?;
        }
        Command::Continuity {
            wav,
            bin,
            shifts,
            out,
            analysis,
        } => {
            let cfg = analysis.stft()?;
            let x = wav_read(&wav, Some(cfg.sample_rate))?;
            write_continuity_csv(&out, &phase_continuity_export(&x, bin, &shifts, &cfg)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

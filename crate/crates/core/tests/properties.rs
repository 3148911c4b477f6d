use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lfs_phase::dsp::{istft, make_window, stft, two_sided_norm_sqr, StftConfig, Waveform};
use lfs_phase::nspp::{init_params, predict_phase, ModelArch};
use lfs_phase::resample::{
    decimate_grid, design_interp_filter, interpolate_grid, interpolation_error, InterpConfig,
};
use lfs_phase::retrieval::{
    amplitude_projection, consistency_projection, lfs_wrap, retrieve, Algorithm, Estimator,
    IterAlgoConfig, PhaseInit,
};
use lfs_phase::{ComplexGrid, Grid, RealGrid};

fn small_cfg(frame_length: usize, frame_shift: usize, fft_size: usize) -> StftConfig {
    StftConfig {
        sample_rate: 8_000,
        frame_length,
        frame_shift,
        fft_size,
        ..StftConfig::default()
    }
}

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn in_principal_range(v: f64) -> bool {
    v > -PI && v <= PI
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stft_roundtrip(seed in any::<u64>(), frames in 10usize..40, extra in 0usize..32, shift_div in 2usize..5) {
        let cfg = small_cfg(64, 64 / shift_div / 2 * 2, 128);
        let len = (frames - 1) * cfg.frame_shift + extra;
        let x = Waveform::new(noise(len, seed), cfg.sample_rate).unwrap();
        let y = istft(&stft(&x, &cfg).unwrap(), &cfg, len).unwrap();
        let err = x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn single_frame_parseval(seed in any::<u64>(), len in 33usize..64) {
        let cfg = small_cfg(64, 64, 128);
        let x = noise(len, seed);
        let c = stft(&Waveform::new(x.clone(), cfg.sample_rate).unwrap(), &cfg).unwrap();
        prop_assert_eq!(c.frames(), 1);
        let window = make_window(64).unwrap();
        // frame 0 is centred on sample 0 and mirrors the left half
        let energy: f64 = window
            .iter()
            .enumerate()
            .map(|(j, w)| (w * x[(j as isize - 32).unsigned_abs()]).powi(2))
            .sum();
        let spectral = two_sided_norm_sqr(&c) / cfg.fft_size as f64;
        prop_assert!((spectral - energy).abs() <= 1e-9 * energy, "{spectral} vs {energy}");
    }

    #[test]
    fn interpolation_keeps_original_rows(seed in any::<u64>(), frames in 1usize..30, bins in 1usize..12, ratio in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::from_fn(frames, bins, |_, _| rng.gen_range(-23.0..4.0));
        let up = interpolate_grid(&g, &InterpConfig::with_ratio(ratio)).unwrap();
        prop_assert_eq!(up.frames(), frames * ratio);
        let back = decimate_grid(&up, ratio).unwrap();
        for (a, b) in back.data().iter().zip(g.data()) {
            prop_assert!(a.to_bits().abs_diff(b.to_bits()) <= 1);
        }
    }

    #[test]
    fn dc_gain_near_ratio(ratio in 1usize..7, half_width in 8usize..14) {
        let f = design_interp_filter(&InterpConfig { ratio, half_width, ..InterpConfig::default() }).unwrap();
        let d = ratio as f64;
        prop_assert!(f.dc_gain() >= 0.99 * d && f.dc_gain() <= 1.01 * d);
    }

    #[test]
    fn no_interpolation_error_without_upsampling(seed in any::<u64>(), frames in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Grid::from_fn(frames, 5, |_, _| rng.gen_range(-9.0..2.0));
        let p = Grid::from_fn(frames, 5, |_, _| rng.gen_range(-PI..PI));
        let e = interpolation_error(&a, &p, &InterpConfig::with_ratio(1)).unwrap();
        prop_assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projections_are_idempotent(seed in any::<u64>(), frames in 2usize..12) {
        let cfg = small_cfg(32, 8, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: ComplexGrid = Grid::from_fn(frames, cfg.bins(), |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let a: RealGrid = Grid::from_fn(frames, cfg.bins(), |_, _| rng.gen_range(0.0..2.0));
        let once = consistency_projection(&c, &cfg).unwrap();
        let twice = consistency_projection(&once, &cfg).unwrap();
        let scale = two_sided_norm_sqr(&once).sqrt().max(1.0);
        for (p, q) in once.data().iter().zip(twice.data()) {
            prop_assert!((p - q).norm() <= 1e-9 * scale);
        }
        let once = amplitude_projection(&c, &a).unwrap();
        let twice = amplitude_projection(&once, &a).unwrap();
        for (p, q) in once.data().iter().zip(twice.data()) {
            prop_assert!((p - q).norm() <= 1e-9);
        }
    }

    #[test]
    fn gla_never_increases_inconsistency(seed in any::<u64>(), frames in 3usize..16, random_init in any::<bool>()) {
        let cfg = small_cfg(32, 8, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: RealGrid = Grid::from_fn(frames, cfg.bins(), |_, _| rng.gen_range(0.0..3.0));
        let init = if random_init { PhaseInit::RandomPhase { seed } } else { PhaseInit::ZeroPhase };
        let acfg = IterAlgoConfig { init, ..IterAlgoConfig::new(Algorithm::Gla, 25) };
        let out = retrieve(&a, &cfg, &acfg).unwrap();
        prop_assert_eq!(out.trace.len(), 26);
        for w in out.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn returned_phases_are_principal(seed in any::<u64>(), frames in 2usize..10, algo in 0usize..3, ratio in 1usize..4) {
        let algorithm = [Algorithm::Gla, Algorithm::FastGla, Algorithm::Raar][algo];
        let cfg = small_cfg(48, 12, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // exact zeros exercise the angle convention at the origin
        let a: RealGrid = Grid::from_fn(frames, cfg.bins(), |_, _| {
            if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..3.0) }
        });
        let acfg = IterAlgoConfig::new(algorithm, 8);
        let direct = retrieve(&a, &cfg, &acfg).unwrap().phase;
        prop_assert!(direct.data().iter().all(|&p| in_principal_range(p)));
        let las = a.map(|m| m.max(1e-10).ln());
        let wrapped = lfs_wrap(Estimator::Iterative(acfg), &las, &InterpConfig::with_ratio(ratio), &cfg).unwrap();
        prop_assert_eq!(wrapped.shape(), las.shape());
        prop_assert!(wrapped.data().iter().all(|&p| in_principal_range(p)));
    }

    #[test]
    fn predicted_phases_are_principal(seed in 0u64..1000, frames in 1usize..12) {
        let arch = ModelArch { input_bins: 9, channels: 8, num_blocks: 1, kernel_time: 3 };
        let params = init_params(&arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let las = Grid::from_fn(frames, 9, |_, _| rng.gen_range(-20.0..3.0));
        let p = predict_phase(&params, &las).unwrap();
        prop_assert_eq!(p.shape(), (frames, 9));
        prop_assert!(p.data().iter().all(|&v| in_principal_range(v)));
    }
}

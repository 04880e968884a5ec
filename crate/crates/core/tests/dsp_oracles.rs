use std::f64::consts::PI;

use avjoint::dsp::{resample, stft_magnitude, to_avg_diff, StftConfig, Waveform, WindowFn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg_1024(window_fn: WindowFn) -> StftConfig {
    StftConfig {
        sample_rate: 16_000,
        window_ms: 64.0,
        hop_ms: 64.0,
        window_fn,
    }
}

fn naive_dft_magnitude(x: &[f64], window: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (t, (&s, &w)) in x.iter().zip(window).enumerate() {
                let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                re += s * w * ang.cos();
                im += s * w * ang.sin();
            }
            re.hypot(im)
        })
        .collect()
}

#[test]
fn stft_matches_naive_dft_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1024);
    for window_fn in [WindowFn::Hann, WindowFn::Rectangular] {
        let cfg = cfg_1024(window_fn);
        assert_eq!(cfg.window_samples(), 1024);
        let window: Vec<f64> = match window_fn {
            WindowFn::Hann => (0..1024).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / 1024.0).cos()).collect(),
            WindowFn::Rectangular => vec![1.0; 1024],
        };
        for _ in 0..50 {
            let x: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = stft_magnitude(&x, &cfg).unwrap();
            assert_eq!((got.rows, got.cols), (1, 513));
            let want = naive_dft_magnitude(&x, &window);
            let scale = want.iter().copied().fold(0.0, f64::max);
            for (g, w) in got.row(0).iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9 * w.abs().max(1e-3 * scale), "{g} vs {w}");
            }
        }
    }
}

#[test]
fn ten_second_clip_gives_56_frames() {
    let cfg = StftConfig::default();
    let m = stft_magnitude(&vec![0.1; 160_000], &cfg).unwrap();
    assert_eq!(m.rows, 56);
    assert_eq!(m.cols, 4097);
}

#[test]
fn bin_centred_sine_peaks_at_its_bin_with_rectangular_window() {
    let cfg = cfg_1024(WindowFn::Rectangular);
    for k in [1usize, 17, 100, 255, 511] {
        let x: Vec<f64> = (0..1024).map(|t| (2.0 * PI * k as f64 * t as f64 / 1024.0).sin()).collect();
        let m = stft_magnitude(&x, &cfg).unwrap();
        let row = m.row(0);
        let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(peak, k);
        assert!((row[k] - 512.0).abs() < 1e-9);
    }
}

#[test]
fn resampled_440_hz_tone_keeps_its_peak() {
    let src = 44_100u32;
    let x: Vec<f64> = (0..src as usize * 2).map(|t| 0.5 * (2.0 * PI * 440.0 * t as f64 / src as f64).sin()).collect();
    let w = resample(&Waveform::mono(x, src).unwrap(), 16_000).unwrap();
    assert_eq!(w.sample_rate(), 16_000);
    let cfg = StftConfig::default();
    let m = stft_magnitude(w.channel(0), &cfg).unwrap();
    let row = m.row(0);
    let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    let hz = peak as f64 * 16_000.0 / cfg.window_samples() as f64;
    assert!((hz - 440.0).abs() <= 16_000.0 / cfg.window_samples() as f64, "peak at {hz} Hz");
}

proptest! {
    #[test]
    fn avg_diff_round_trips_pcm_samples(pairs in prop::collection::vec((any::<i16>(), any::<i16>()), 1..64)) {
        let l: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 32768.0).collect();
        let r: Vec<f64> = pairs.iter().map(|p| p.1 as f64 / 32768.0).collect();
        let ad = to_avg_diff(&Waveform::stereo(l.clone(), r.clone(), 16_000).unwrap()).unwrap();
        for i in 0..l.len() {
            let (a, d) = (ad.channel(0)[i], ad.channel(1)[i]);
            prop_assert_eq!(a + d, l[i]);
            prop_assert_eq!(a - d, r[i]);
        }
    }

    #[test]
    fn stft_magnitude_is_linear_in_gain(seed in any::<u64>(), gain in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = cfg_1024(WindowFn::Hann);
        let x: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * gain).collect();
        let (mx, my) = (stft_magnitude(&x, &cfg).unwrap(), stft_magnitude(&y, &cfg).unwrap());
        let scale = mx.data.iter().copied().fold(0.0, f64::max);
        for (a, b) in mx.data.iter().zip(&my.data) {
            prop_assert!((a * gain - b).abs() <= 1e-9 * scale * gain);
        }
    }

    #[test]
    fn frame_count_follows_window_and_hop(len in 0usize..200_000) {
        let cfg = StftConfig::default();
        let expect = if len < 8192 { None } else { Some((len - 8192) / 2736 + 1) };
        prop_assert_eq!(cfg.n_frames(len), expect);
    }
}

//! Filterbanks applied to STFT magnitude spectra.
//!
//! Two designs are provided: triangular Mel filters (long-term FBank) and a
//! constant-Q bank of Gaussian filters in log-frequency (scalogram). Both
//! implement [`FilterBankDesign`], so other banks can be swapped in.

use crate::dsp::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Mel,
    Wavelet,
}

/// Nonnegative `n_bins x n_fft_bins` weights. Each row keeps the column range
/// holding its nonzero weights so application skips the zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub kind: FilterKind,
    pub weights: Matrix,
    pub center_freqs: Vec<f64>,
    support: Vec<(usize, usize)>,
}

impl FilterBank {
    pub fn new(kind: FilterKind, weights: Matrix, center_freqs: Vec<f64>) -> Result<Self> {
        if weights.rows != center_freqs.len() {
            return Err(Error::input("one centre frequency per filter required"));
        }
        if weights.data.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::input("filter weights must be finite and nonnegative"));
        }
        let support = (0..weights.rows)
            .map(|r| {
                let row = weights.row(r);
                let first = row.iter().position(|&w| w > 0.0);
                let last = row.iter().rposition(|&w| w > 0.0);
                match (first, last) {
                    (Some(a), Some(b)) => Ok((a, b + 1)),
                    _ => Err(Error::input(format!("filter {r} has no positive weight"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            weights,
            center_freqs,
            support,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.weights.rows
    }

    pub fn n_fft_bins(&self) -> usize {
        self.weights.cols
    }
}

/// Strategy that builds a bank for a given spectrum size.
pub trait FilterBankDesign: Send + Sync {
    fn n_bins(&self) -> usize;
    fn build(&self, n_fft_bins: usize, sample_rate: u32) -> Result<FilterBank>;
}

fn fft_bin_freqs(n_fft_bins: usize, sample_rate: u32) -> Vec<f64> {
    let n_fft = 2 * (n_fft_bins - 1);
    (0..n_fft_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect()
}

fn check_sizes(n_bins: usize, n_fft_bins: usize, sample_rate: u32) -> Result<()> {
    if n_bins == 0 {
        return Err(Error::config("filterbank needs at least one filter"));
    }
    if n_fft_bins < 2 || n_bins >= n_fft_bins {
        return Err(Error::config(format!(
            "{n_bins} filters need more than {n_bins} FFT bins, got {n_fft_bins}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::config("sample rate must be positive"));
    }
    Ok(())
}

/// A filter that misses every FFT bin gets unit weight at the bin nearest
/// its centre.
fn ensure_nonempty(weights: &mut Matrix, centers: &[f64], freqs: &[f64]) {
    for (r, &c) in centers.iter().enumerate() {
        if weights.row(r).iter().all(|&w| w <= 0.0) {
            let nearest = freqs
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - c).abs().total_cmp(&(b.1 - c).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            weights.row_mut(r)[nearest] = 1.0;
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centres equally spaced on the Mel scale between
/// 0 Hz and Nyquist; each triangle spans its neighbours' centres.
#[derive(Debug, Clone)]
pub struct MelDesign {
    pub n_bins: usize,
}

impl FilterBankDesign for MelDesign {
    fn n_bins(&self) -> usize {
        self.n_bins
    }

    fn build(&self, n_fft_bins: usize, sample_rate: u32) -> Result<FilterBank> {
        build_mel_filterbank(self.n_bins, n_fft_bins, sample_rate)
    }
}

pub fn build_mel_filterbank(n_bins: usize, n_fft_bins: usize, sample_rate: u32) -> Result<FilterBank> {
    check_sizes(n_bins, n_fft_bins, sample_rate)?;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_bins + 1) as f64))
        .collect();
    let freqs = fft_bin_freqs(n_fft_bins, sample_rate);
    let mut weights = Matrix::zeros(n_bins, n_fft_bins);
    for b in 0..n_bins {
        let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for (k, &f) in freqs.iter().enumerate() {
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            weights.row_mut(b)[k] = w;
        }
    }
    let centers = edges[1..=n_bins].to_vec();
    ensure_nonempty(&mut weights, &centers, &freqs);
    FilterBank::new(FilterKind::Mel, weights, centers)
}

/// Constant-Q bank: centres geometrically spaced from `f_min` to Nyquist,
/// each filter a unit-peak Gaussian in log-frequency whose width makes
/// neighbouring filters cross at half their peak. Weights below
/// `exp(-TRUNCATE_SIGMAS^2 / 2)` are dropped.
#[derive(Debug, Clone)]
pub struct ConstantQDesign {
    pub n_bins: usize,
    pub f_min: f64,
}

impl ConstantQDesign {
    pub const TRUNCATE_SIGMAS: f64 = 6.0;
    pub const DEFAULT_F_MIN: f64 = 50.0;

    pub fn new(n_bins: usize) -> Self {
        Self {
            n_bins,
            f_min: Self::DEFAULT_F_MIN,
        }
    }

    /// Centre frequencies for the given Nyquist.
    pub fn centers(&self, nyquist: f64) -> Vec<f64> {
        if self.n_bins == 1 {
            return vec![(self.f_min * nyquist).sqrt()];
        }
        let span = (nyquist / self.f_min).ln();
        (0..self.n_bins)
            .map(|i| self.f_min * (span * i as f64 / (self.n_bins - 1) as f64).exp())
            .collect()
    }

    /// Standard deviation in natural-log frequency.
    pub fn log_sigma(&self, nyquist: f64) -> f64 {
        let span = (nyquist / self.f_min).ln();
        let step = if self.n_bins == 1 {
            span
        } else {
            span / (self.n_bins - 1) as f64
        };
        // exp(-(step/2)^2 / (2 sigma^2)) = 1/2
        (step / 2.0) / (2.0 * std::f64::consts::LN_2).sqrt()
    }
}

impl FilterBankDesign for ConstantQDesign {
    fn n_bins(&self) -> usize {
        self.n_bins
    }

    fn build(&self, n_fft_bins: usize, sample_rate: u32) -> Result<FilterBank> {
        check_sizes(self.n_bins, n_fft_bins, sample_rate)?;
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f_min > 0.0 && self.f_min < nyquist) {
            return Err(Error::config(format!(
                "wavelet f_min {} must lie in (0, {nyquist})",
                self.f_min
            )));
        }
        let centers = self.centers(nyquist);
        let sigma = self.log_sigma(nyquist);
        let freqs = fft_bin_freqs(n_fft_bins, sample_rate);
        let mut weights = Matrix::zeros(self.n_bins, n_fft_bins);
        for (b, &c) in centers.iter().enumerate() {
            let lc = c.ln();
            for (k, &f) in freqs.iter().enumerate() {
                if f <= 0.0 {
                    continue;
                }
                let z = (f.ln() - lc) / sigma;
                if z.abs() <= Self::TRUNCATE_SIGMAS {
                    weights.row_mut(b)[k] = (-0.5 * z * z).exp();
                }
            }
        }
        ensure_nonempty(&mut weights, &centers, &freqs);
        FilterBank::new(FilterKind::Wavelet, weights, centers)
    }
}

pub fn build_wavelet_filterbank(n_bins: usize, n_fft_bins: usize, sample_rate: u32) -> Result<FilterBank> {
    ConstantQDesign::new(n_bins).build(n_fft_bins, sample_rate)
}

/// `out[t, b] = ln(max(sum_k fb[b, k] * spec[t, k], log_floor))`.
pub fn apply_filterbank(spec: &Matrix, fb: &FilterBank, log_floor: f64) -> Result<Matrix> {
    if spec.cols != fb.n_fft_bins() {
        return Err(Error::input(format!(
            "spectrum has {} bins, filterbank expects {}",
            spec.cols,
            fb.n_fft_bins()
        )));
    }
    if !(log_floor > 0.0) {
        return Err(Error::config("log floor must be positive"));
    }
    let mut out = Matrix::zeros(spec.rows, fb.n_bins());
    for t in 0..spec.rows {
        let s = spec.row(t);
        for (b, &(lo, hi)) in fb.support.iter().enumerate() {
            let w = &fb.weights.row(b)[lo..hi];
            let e: f64 = w.iter().zip(&s[lo..hi]).map(|(a, b)| a * b).sum();
            out.row_mut(t)[b] = e.max(log_floor).ln();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn increasing(v: &[f64]) -> bool {
        v.windows(2).all(|w| w[1] > w[0])
    }

    #[test]
    fn single_mel_triangle_spans_band() {
        let fb = build_mel_filterbank(1, 257, 16_000).unwrap();
        let mid = mel_to_hz(hz_to_mel(8000.0) / 2.0);
        assert!((fb.center_freqs[0] - mid).abs() < 1e-9);
        let row = fb.weights.row(0);
        assert_eq!(row[0], 0.0);
        assert!(row[1] > 0.0 && row[255] > 0.0);
        let peak = row.iter().cloned().fold(0.0, f64::max);
        assert!(peak <= 1.0 && peak > 0.95);
    }

    #[test]
    fn four_mel_filters_follow_formula() {
        let fb = build_mel_filterbank(4, 257, 16_000).unwrap();
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        for (i, &c) in fb.center_freqs.iter().enumerate() {
            let m = top * (i + 1) as f64 / 5.0;
            let want = 700.0 * (10f64.powf(m / 2595.0) - 1.0);
            assert!((c - want).abs() < 1e-9);
        }
        assert!(increasing(&fb.center_freqs));
        for r in 0..4 {
            assert!(fb.weights.row(r).iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn mel_covers_every_bin_between_centres() {
        for &(n, nfft) in &[(256usize, 4097usize), (40, 257), (10, 65)] {
            let fb = build_mel_filterbank(n, nfft, 16_000).unwrap();
            let freqs = fft_bin_freqs(nfft, 16_000);
            let (lo, hi) = (fb.center_freqs[0], fb.center_freqs[n - 1]);
            for (k, &f) in freqs.iter().enumerate() {
                if f >= lo && f <= hi {
                    let col: f64 = (0..n).map(|r| fb.weights.get(r, k)).sum();
                    assert!(col > 0.0, "bin {k} ({f} Hz) uncovered for n={n}");
                }
            }
        }
    }

    #[test]
    fn too_many_filters_is_invalid() {
        assert!(matches!(
            build_mel_filterbank(257, 257, 16_000),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            build_wavelet_filterbank(300, 257, 16_000),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn wavelet_centres_are_geometric() {
        let fb = build_wavelet_filterbank(290, 4097, 16_000).unwrap();
        assert_eq!(fb.n_bins(), 290);
        assert!(increasing(&fb.center_freqs));
        let r0 = fb.center_freqs[1] / fb.center_freqs[0];
        for w in fb.center_freqs.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
        assert!((fb.center_freqs[0] - 50.0).abs() < 1e-9);
        assert!((fb.center_freqs[289] - 8000.0).abs() < 1e-6);
    }

    #[test]
    fn neighbouring_wavelet_filters_cross_at_half_peak() {
        let d = ConstantQDesign::new(290);
        let c = d.centers(8000.0);
        let s = d.log_sigma(8000.0);
        let mid = ((c[10].ln() + c[11].ln()) / 2.0 - c[10].ln()) / s;
        assert!(((-0.5 * mid * mid).exp() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_wavelet_is_unit_peak_bump() {
        let fb = build_wavelet_filterbank(1, 4097, 16_000).unwrap();
        let peak = fb.weights.row(0).iter().cloned().fold(0.0, f64::max);
        assert!(peak <= 1.0 && peak > 0.999);
    }

    #[test]
    fn apply_matches_double_loop() {
        let spec = Matrix::from_vec(3, 5, vec![0.1, 0.5, 2.0, 0.0, 1.5, 3.0, 0.2, 0.7, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 1e-12]).unwrap();
        let w = Matrix::from_vec(2, 5, vec![0.3, 0.0, 1.2, 0.4, 0.1, 0.0, 0.9, 0.0, 0.5, 0.25]).unwrap();
        let fb = FilterBank::new(FilterKind::Mel, w.clone(), vec![1.0, 2.0]).unwrap();
        let out = apply_filterbank(&spec, &fb, 1e-10).unwrap();
        for t in 0..3 {
            for b in 0..2 {
                let mut e = 0.0;
                for k in 0..5 {
                    e += w.get(b, k) * spec.get(t, k);
                }
                let want = e.max(1e-10).ln();
                assert!((out.get(t, b) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_spectrum_hits_floor_and_shape_mismatch_fails() {
        let fb = build_mel_filterbank(4, 33, 16_000).unwrap();
        let out = apply_filterbank(&Matrix::zeros(2, 33), &fb, 1e-10).unwrap();
        assert!(out.data.iter().all(|&v| v == 1e-10f64.ln()));
        assert!(matches!(
            apply_filterbank(&Matrix::zeros(2, 32), &fb, 1e-10),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn identity_bank_takes_log_of_spectrum() {
        let n = 4;
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            w.row_mut(i)[i] = 1.0;
        }
        let fb = FilterBank::new(FilterKind::Mel, w, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = Matrix::from_vec(1, 4, vec![0.0, 1.0, 2.5, 1e-20]).unwrap();
        let out = apply_filterbank(&spec, &fb, 1e-10).unwrap();
        for k in 0..4 {
            assert_eq!(out.get(0, k), spec.get(0, k).max(1e-10).ln());
        }
    }
}

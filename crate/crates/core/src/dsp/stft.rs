use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dsp::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowFn {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    Hann,
    Rectangular,
}

impl WindowFn {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowFn::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            WindowFn::Rectangular => vec![1.0; n],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowFn::Hann => "hann",
            WindowFn::Rectangular => "rectangular",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowFn::Hann),
            "rectangular" | "rect" => Ok(WindowFn::Rectangular),
            other => Err(Error::config(format!("unknown window function {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub window_fn: WindowFn,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 512.0,
            hop_ms: 171.0,
            window_fn: WindowFn::Hann,
        }
    }
}

impl StftConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_fft_bins(&self) -> usize {
        self.window_samples() / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("stft.sample_rate must be positive"));
        }
        if self.window_ms < self.hop_ms {
            return Err(Error::config(format!(
                "window ({} ms) shorter than hop ({} ms)",
                self.window_ms, self.hop_ms
            )));
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return Err(Error::config("window and hop must span at least one sample"));
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples, if at least one fits.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        let win = self.window_samples();
        (len >= win).then(|| (len - win) / self.hop_samples() + 1)
    }

    /// Centre time of frame `t` in seconds.
    pub fn frame_center_time(&self, t: usize) -> f64 {
        (t * self.hop_samples() + self.window_samples() / 2) as f64 / self.sample_rate as f64
    }
}

/// Reusable STFT plan for one configuration.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_samples();
        Ok(Self {
            cfg: cfg.clone(),
            window: cfg.window_fn.coefficients(n),
            fft: FftPlanner::new().plan_fft_forward(n),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// `frames x (window/2 + 1)` magnitudes of the windowed DFT.
    pub fn magnitude(&self, ch: &[f64]) -> Result<Matrix> {
        let win = self.window.len();
        let hop = self.cfg.hop_samples();
        let frames = self.cfg.n_frames(ch.len()).ok_or_else(|| {
            Error::input(format!(
                "signal of {} samples is shorter than one {win}-sample window",
                ch.len()
            ))
        })?;
        let bins = win / 2 + 1;
        let mut out = Matrix::zeros(frames, bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); win];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let seg = &ch[t * hop..t * hop + win];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(s * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (o, c) in out.row_mut(t).iter_mut().zip(&buf[..bins]) {
                *o = c.norm();
            }
        }
        Ok(out)
    }
}

pub fn stft_magnitude(ch: &[f64], cfg: &StftConfig) -> Result<Matrix> {
    Stft::new(cfg)?.magnitude(ch)
}

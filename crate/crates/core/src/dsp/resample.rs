//! Polyphase windowed-sinc sample-rate conversion.
//!
//! For a rational ratio `L/M` (after dividing both rates by their gcd), output
//! sample `n` sits at source position `n*M/L`. Its value is a Hann-windowed
//! sinc interpolation of the source with cutoff
//! `0.5 * min(1, L/M) * ROLLOFF` cycles per source sample and `ZERO_CROSSINGS`
//! zero crossings on each side. The taps of each of the `L` phases are
//! normalized to unit sum so DC passes unchanged.

use std::f64::consts::PI;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const ROLLOFF: f64 = 0.95;
pub const ZERO_CROSSINGS: f64 = 16.0;
const MAX_TABLE_PHASES: usize = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

struct Kernel {
    up: u64,
    down: u64,
    cutoff: f64,
    half_width: f64,
    /// Taps on each side of the centre sample.
    side: usize,
    table: Option<Vec<Vec<f64>>>,
}

impl Kernel {
    fn new(src: u32, dst: u32) -> Self {
        let g = gcd(src as u64, dst as u64);
        let up = dst as u64 / g;
        let down = src as u64 / g;
        let cutoff = 0.5 * (up as f64 / down as f64).min(1.0) * ROLLOFF;
        let half_width = ZERO_CROSSINGS / (2.0 * cutoff);
        let side = half_width.ceil() as usize;
        let mut k = Self {
            up,
            down,
            cutoff,
            half_width,
            side,
            table: None,
        };
        if (up as usize) <= MAX_TABLE_PHASES {
            k.table = Some((0..up).map(|p| k.taps(p)).collect());
        }
        k
    }

    /// Normalized taps for source samples `i - side + 1 ..= i + side` when
    /// the output lies `phase / up` samples past `i`.
    fn taps(&self, phase: u64) -> Vec<f64> {
        let frac = phase as f64 / self.up as f64;
        let mut taps: Vec<f64> = (0..2 * self.side)
            .map(|j| {
                let tau = frac + self.side as f64 - 1.0 - j as f64;
                let u = tau / self.half_width;
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    2.0 * self.cutoff * sinc(2.0 * self.cutoff * tau) * 0.5 * (1.0 + (PI * u).cos())
                }
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        taps
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let out_len = ((x.len() as u64 * self.up).div_ceil(self.down)) as usize;
        let mut out = Vec::with_capacity(out_len);
        let mut scratch;
        for n in 0..out_len as u64 {
            let num = n * self.down;
            let i = (num / self.up) as isize;
            let phase = num % self.up;
            let taps: &[f64] = match &self.table {
                Some(t) => &t[phase as usize],
                None => {
                    scratch = self.taps(phase);
                    &scratch
                }
            };
            let start = i - self.side as isize + 1;
            let mut acc = 0.0;
            for (j, &t) in taps.iter().enumerate() {
                let k = start + j as isize;
                if k >= 0 && (k as usize) < x.len() {
                    acc += t * x[k as usize];
                }
            }
            out.push(acc);
        }
        out
    }
}

/// Convert `w` to `target_rate`. Returns an identical copy when the rates
/// already match.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::input("cannot resample an empty waveform"));
    }
    if target_rate == 0 {
        return Err(Error::input("target rate must be positive"));
    }
    if w.sample_rate() == target_rate {
        return Ok(w.clone());
    }
    let kernel = Kernel::new(w.sample_rate(), target_rate);
    let channels = w.channels().iter().map(|c| kernel.run(c)).collect();
    Waveform::new(channels, target_rate)
}

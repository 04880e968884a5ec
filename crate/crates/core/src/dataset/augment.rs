//! Image augmentation: random resized crop, horizontal flip, colour jitter.

use rand::Rng;

use crate::dataset::image::{ImageTensor, CHANNELS};
use crate::error::{Error, Result};

const RATIO_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Fraction of the image area kept by the random crop.
    pub crop_scale_range: (f64, f64),
    pub hflip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[max(0, 1 - s), 1 + s]`.
    pub jitter_strength: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.5, 1.0),
            hflip_prob: 0.5,
            jitter_strength: 0.4,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// All knobs at their identity values, but still enabled.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            jitter_strength: 0.0,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config(format!("hflip probability {} outside [0, 1]", self.hflip_prob)));
        }
        if !(self.jitter_strength >= 0.0) {
            return Err(Error::config(format!("jitter strength {} must be >= 0", self.jitter_strength)));
        }
        Ok(())
    }
}

/// Crop box `(x0, y0, w, h)` in pixels.
fn sample_crop<R: Rng>(h: usize, w: usize, (lo, hi): (f64, f64), rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (rlo, rhi) = (RATIO_RANGE.0.ln(), RATIO_RANGE.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(lo..=hi);
        let ratio = rng.random_range(rlo..=rhi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x0 = rng.random_range(0..=w - cw);
            let y0 = rng.random_range(0..=h - ch);
            return (x0, y0, cw, ch);
        }
    }
    (0, 0, w, h)
}

fn resize_crop(img: &ImageTensor, (x0, y0, cw, ch): (usize, usize, usize, usize)) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let coord = |o: usize, start: usize, len: usize, out: usize| {
        let s = start as f64 + (o as f64 + 0.5) * len as f64 / out as f64 - 0.5;
        let s = s.clamp(start as f64, (start + len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(start + len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..w).map(|x| coord(x, x0, cw, w)).collect();
    let mut out = vec![0.0f32; CHANNELS * h * w];
    for y in 0..h {
        let (ya, yb, fy) = coord(y, y0, ch, h);
        for (x, &(xa, xb, fx)) in xs.iter().enumerate() {
            for c in 0..CHANNELS {
                let top = img.get(c, ya, xa) * (1.0 - fx) + img.get(c, ya, xb) * fx;
                let bot = img.get(c, yb, xa) * (1.0 - fx) + img.get(c, yb, xb) * fx;
                out[(c * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn gray(px: &[f32], plane: usize, p: usize) -> f32 {
    0.299 * px[p] + 0.587 * px[plane + p] + 0.114 * px[2 * plane + p]
}

fn jitter<R: Rng>(px: &mut [f32], plane: usize, s: f64, rng: &mut R) {
    let lo = (1.0 - s).max(0.0);
    let mut factor = || rng.random_range(lo..=1.0 + s) as f32;
    let (b, c, sat) = (factor(), factor(), factor());
    px.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    let mean = (0..plane).map(|p| gray(px, plane, p)).sum::<f32>() / plane as f32;
    px.iter_mut().for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
    for p in 0..plane {
        let g = gray(px, plane, p);
        for ch in 0..CHANNELS {
            let v = &mut px[ch * plane + p];
            *v = ((*v - g) * sat + g).clamp(0.0, 1.0);
        }
    }
}

pub fn augment_image<R: Rng>(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut R) -> ImageTensor {
    if !cfg.enabled {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let mut px = if cfg.crop_scale_range == (1.0, 1.0) {
        img.data().to_vec()
    } else {
        resize_crop(img, sample_crop(h, w, cfg.crop_scale_range, rng))
    };
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        for row in px.chunks_mut(w) {
            row.reverse();
        }
    }
    if cfg.jitter_strength > 0.0 {
        jitter(&mut px, h * w, cfg.jitter_strength, rng);
    }
    img.with_pixels(px, h, w)
}

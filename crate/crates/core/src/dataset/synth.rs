//! Synthetic audio-visual scenes.
//!
//! Class `c` sounds like three sinusoids at distinct constant-Q centre
//! frequencies plus white noise, and looks like a striped texture with a
//! class hue, orientation and stripe frequency. Confusion modes make paired
//! classes `(0, 1), (2, 3), ...` share one modality's signature.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::image::{ImageTensor, CHANNELS};
use crate::dataset::manifest::{split_train_val, Manifest, ManifestEntry, Split};
use crate::dsp::features::SCALOGRAM_BINS;
use crate::dsp::wav::write_wav;
use crate::dsp::{ConstantQDesign, Waveform};
use crate::error::{Error, IoContext, Result};
use crate::seed::{self, Purpose};

pub const TONES_PER_CLASS: usize = 3;
const TONE_AMPLITUDE: f64 = 0.05;
const FIRST_TONE_BIN: usize = 40;
const TONE_BIN_SPAN: usize = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfusionMode {
    None,
    /// Paired classes share visual signatures; only audio separates them.
    AudioOnlyPairs,
    /// Paired classes share audio signatures; only vision separates them.
    VisualOnlyPairs,
}

impl ConfusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "audio_only_pairs" => Ok(Self::AudioOnlyPairs),
            "visual_only_pairs" => Ok(Self::VisualOnlyPairs),
            other => Err(Error::config(format!("unknown confusion mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::AudioOnlyPairs => "audio_only_pairs",
            Self::VisualOnlyPairs => "visual_only_pairs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub image_size: usize,
    /// Broadband SNR of the nominal tone mixture against the noise.
    pub snr_db: f64,
    /// Probability that each class tone is present in a clip.
    pub tone_presence: f64,
    /// Tones borrowed from other classes, added to every clip.
    pub distractor_tones: usize,
    /// Std-dev of per-pixel Gaussian noise.
    pub image_noise: f64,
    /// Std-dev of the per-clip hue offset, in turns.
    pub hue_jitter: f64,
    pub confusion_mode: ConfusionMode,
    pub test_fraction: f64,
    /// Fraction of the remaining clips moved to val; 0 keeps all in train.
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            clips_per_class: 5,
            clip_seconds: 10.0,
            sample_rate: 16_000,
            image_size: 64,
            snr_db: 10.0,
            tone_presence: 1.0,
            distractor_tones: 0,
            image_noise: 0.05,
            hue_jitter: 0.02,
            confusion_mode: ConfusionMode::None,
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_classes < 2 || self.n_classes * TONES_PER_CLASS > TONE_BIN_SPAN {
            return bad(format!("n_classes {} outside [2, {}]", self.n_classes, TONE_BIN_SPAN / TONES_PER_CLASS));
        }
        if self.confusion_mode != ConfusionMode::None && self.n_classes % 2 != 0 {
            return bad("confusion modes pair classes and need an even n_classes".into());
        }
        if self.clips_per_class == 0 {
            return bad("clips_per_class must be >= 1".into());
        }
        if !(self.clip_seconds > 0.0) || self.sample_rate == 0 || self.image_size < 4 {
            return bad("clip_seconds, sample_rate and image_size (>= 4) must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tone_presence) || self.distractor_tones > (self.n_classes - 1) * TONES_PER_CLASS {
            return bad("tone_presence must lie in [0, 1] and distractors must fit the other classes' tones".into());
        }
        if !(self.image_noise >= 0.0 && self.hue_jitter >= 0.0 && self.snr_db.is_finite()) {
            return bad("noise levels must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("test_fraction and val_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("scene{c}")).collect()
    }

    fn audio_signature(&self, class: usize) -> usize {
        match self.confusion_mode {
            ConfusionMode::VisualOnlyPairs => class & !1,
            _ => class,
        }
    }

    fn visual_signature(&self, class: usize) -> usize {
        match self.confusion_mode {
            ConfusionMode::AudioOnlyPairs => class & !1,
            _ => class,
        }
    }

    /// Tone frequencies of audio signature `sig`.
    pub fn tone_frequencies(&self, sig: usize) -> Vec<f64> {
        let centers = ConstantQDesign::new(SCALOGRAM_BINS).centers(self.sample_rate as f64 / 2.0);
        let step = TONE_BIN_SPAN / (TONES_PER_CLASS * self.n_classes);
        (0..TONES_PER_CLASS)
            .map(|j| centers[FIRST_TONE_BIN + (j * self.n_classes + sig) * step])
            .collect()
    }

    pub fn n_images(&self) -> usize {
        self.clip_seconds.ceil() as usize
    }

    pub fn clip_id(class: usize, k: usize) -> String {
        format!("c{class:02}_{k:04}")
    }
}

/// Audio and 1 fps frames of one clip.
pub struct SyntheticClip {
    pub clip_id: String,
    pub label: usize,
    pub audio: Waveform,
    pub frames: Vec<ImageTensor>,
}

fn synth_audio(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let sr = spec.sample_rate as f64;
    let n = (spec.clip_seconds * sr).round() as usize;
    let own = spec.audio_signature(class);
    let mut tones: Vec<f64> = spec
        .tone_frequencies(own)
        .into_iter()
        .filter(|_| rng.random_bool(spec.tone_presence))
        .collect();
    let mut others: Vec<f64> = (0..spec.n_classes)
        .filter(|&s| spec.audio_signature(s) == s && s != own)
        .flat_map(|s| spec.tone_frequencies(s))
        .collect();
    others.shuffle(rng);
    tones.extend(others.into_iter().take(spec.distractor_tones));

    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    for f in tones {
        let amp = TONE_AMPLITUDE * rng.random_range(0.6..1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let pan: f64 = rng.random_range(-0.6..0.6);
        let w = 2.0 * PI * f / sr;
        for i in 0..n {
            let v = amp * (w * i as f64 + phase).sin();
            left[i] += v * (1.0 + pan);
            right[i] += v * (1.0 - pan);
        }
    }
    let nominal_power = TONES_PER_CLASS as f64 * TONE_AMPLITUDE * TONE_AMPLITUDE * 0.64 / 2.0;
    let sigma = (nominal_power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    for v in left.iter_mut().chain(right.iter_mut()) {
        *v = (*v + noise.sample(rng)).clamp(-1.0, 1.0);
    }
    Waveform::stereo(left, right, spec.sample_rate)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn synth_frames(spec: &SyntheticSpec, class: usize, clip_id: &str, rng: &mut ChaCha8Rng) -> Result<Vec<ImageTensor>> {
    let sig = spec.visual_signature(class);
    let k = spec.n_classes as f64;
    let size = spec.image_size;
    let hue = sig as f64 / k + Normal::new(0.0, spec.hue_jitter.max(1e-12)).unwrap().sample(rng);
    let theta = PI * sig as f64 / k;
    let freq = 2.0 + (sig % 3) as f64;
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let value = rng.random_range(0.5..0.7);
    let pixel_noise = Normal::new(0.0, spec.image_noise.max(1e-12)).unwrap();
    let plane = size * size;
    (0..spec.n_images())
        .map(|s| {
            let phase = phase0 + 0.3 * s as f64;
            let mut data = vec![0.0f32; CHANNELS * plane];
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / size as f64;
                    let stripe = (2.0 * PI * freq * u + phase).sin();
                    let rgb = hsv_to_rgb(hue, 0.7, value + 0.25 * stripe);
                    for c in 0..CHANNELS {
                        let n = if spec.image_noise > 0.0 { pixel_noise.sample(rng) } else { 0.0 };
                        data[c * plane + y * size + x] = (rgb[c] + n).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            ImageTensor::new(data, size, size, clip_id, s)
        })
        .collect()
}

/// The `k`-th clip of `class`. Depends only on `(spec, seed, class, k)`.
pub fn synth_clip(spec: &SyntheticSpec, seed: u64, class: usize, k: usize) -> Result<SyntheticClip> {
    let clip_id = SyntheticSpec::clip_id(class, k);
    let mut rng = seed::rng(seed, Purpose::Synth, class as u64, k as u64);
    let audio = synth_audio(spec, class, &mut rng)?;
    let frames = synth_frames(spec, class, &clip_id, &mut rng)?;
    Ok(SyntheticClip {
        clip_id,
        label: class,
        audio,
        frames,
    })
}

fn assign_splits(spec: &SyntheticSpec, seed: u64, entries: &mut [ManifestEntry]) {
    for class in 0..spec.n_classes {
        let mut idx: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].label == class).collect();
        idx.shuffle(&mut seed::rng(seed, Purpose::Split, class as u64, u64::MAX));
        let n_test = (spec.test_fraction * idx.len() as f64).round() as usize;
        for (j, &i) in idx.iter().enumerate() {
            entries[i].split = if j < n_test { Split::Test } else { Split::Train };
        }
    }
}

/// Writes `clips/<id>/audio.wav`, `clips/<id>/frames/NNNN.ppm` (1 fps) and
/// `manifest.tsv` under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.n_classes)
        .flat_map(|c| (0..spec.clips_per_class).map(move |k| (c, k)))
        .collect();
    let mut entries = jobs
        .par_iter()
        .map(|&(class, k)| {
            let clip = synth_clip(spec, seed, class, k)?;
            let rel = PathBuf::from("clips").join(&clip.clip_id);
            let frames_rel = rel.join("frames");
            let frames_dir = out_dir.join(&frames_rel);
            std::fs::create_dir_all(&frames_dir).at(&frames_dir)?;
            write_wav(&out_dir.join(rel.join("audio.wav")), &clip.audio)?;
            for f in &clip.frames {
                f.write_ppm(&frames_dir.join(format!("{:04}.ppm", f.second_index)))?;
            }
            Ok(ManifestEntry {
                clip_id: clip.clip_id,
                audio_path: rel.join("audio.wav"),
                frames_dir: frames_rel,
                label: class,
                split: Split::Train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    assign_splits(spec, seed, &mut entries);
    let mut manifest = Manifest::new(spec.class_names(), entries, out_dir)?;
    if spec.val_fraction > 0.0 && spec.clips_per_class >= 2 {
        manifest = split_train_val(&manifest, spec.val_fraction, seed)?;
    }
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            clip_seconds: 1.0,
            image_size: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn tones_are_distinct_across_classes() {
        let spec = SyntheticSpec {
            n_classes: 6,
            ..SyntheticSpec::default()
        };
        let mut all: Vec<f64> = (0..6).flat_map(|c| spec.tone_frequencies(c)).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        assert_eq!(all.len(), 18);
        assert!(all.iter().all(|&f| f > 50.0 && f < 8000.0));
    }

    #[test]
    fn clip_is_deterministic() {
        let a = synth_clip(&small(), 3, 1, 2).unwrap();
        let b = synth_clip(&small(), 3, 1, 2).unwrap();
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.frames.len(), 1);
        assert_ne!(synth_clip(&small(), 4, 1, 2).unwrap().audio, a.audio);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { n_classes: 1, ..small() },
            SyntheticSpec { n_classes: 5, confusion_mode: ConfusionMode::AudioOnlyPairs, ..small() },
            SyntheticSpec { clips_per_class: 0, ..small() },
            SyntheticSpec { test_fraction: 1.0, ..small() },
        ] {
            assert!(matches!(spec.validate(), Err(Error::InvalidConfig(_))));
        }
    }
}

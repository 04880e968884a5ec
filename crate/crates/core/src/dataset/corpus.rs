//! In-memory clips loaded from a manifest.

use std::path::{Path, PathBuf};
use rayon::prelude::*;

use crate::dataset::align::{align, AlignedSample};
use crate::dataset::image::{downsample_video, ImageTensor};
use crate::dataset::manifest::{Manifest, ManifestEntry, Split};
use crate::dsp::wav::read_wav;
use crate::dsp::{avf, FeatureExtractor, FeatureMatrix};
use crate::error::{Error, IoContext, Result};

pub enum FeatureSource<'a> {
    /// Extract from each clip's WAV.
    Extract(&'a FeatureExtractor),
    /// Read `<dir>/<clip_id>.avf` files written by `extract`.
    AvfDir(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ClipData {
    pub clip_id: String,
    pub label: usize,
    pub split: Split,
    pub audio: Vec<FeatureMatrix>,
    /// 1 fps frames, `second_index` increasing.
    pub frames: Vec<ImageTensor>,
}

impl ClipData {
    pub fn samples(&self) -> Result<Vec<AlignedSample>> {
        align(&self.audio, &self.frames, self.label)
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub clips: Vec<ClipData>,
}

pub fn avf_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.avf"))
}

/// Frames of a directory of `.ppm` files in file-name order.
pub fn read_frames(dir: &Path, clip_id: &str, fps: f64) -> Result<Vec<ImageTensor>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()).at(dir))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::input(format!("no .ppm frames in {}", dir.display())));
    }
    let frames = files
        .iter()
        .enumerate()
        .map(|(i, p)| ImageTensor::read_ppm(p, clip_id, i))
        .collect::<Result<Vec<_>>>()?;
    downsample_video(&frames, fps)
}

fn load_clip(m: &Manifest, e: &ManifestEntry, source: &FeatureSource<'_>, fps: f64) -> Result<ClipData> {
    let audio = match source {
        FeatureSource::Extract(x) => x.extract(&read_wav(&m.resolve(&e.audio_path))?, &e.clip_id)?,
        FeatureSource::AvfDir(dir) => {
            let path = avf_path(dir, &e.clip_id);
            let (id, frames) = avf::read(&path)?;
            if id != e.clip_id {
                return Err(Error::input(format!("{} holds clip {id:?}, expected {:?}", path.display(), e.clip_id)));
            }
            frames
        }
    };
    Ok(ClipData {
        clip_id: e.clip_id.clone(),
        label: e.label,
        split: e.split,
        audio,
        frames: read_frames(&m.resolve(&e.frames_dir), &e.clip_id, fps)?,
    })
}

impl Corpus {
    /// Loads the clips of `splits` in manifest order, in parallel.
    pub fn load(m: &Manifest, source: &FeatureSource<'_>, video_fps: f64, splits: &[Split]) -> Result<Self> {
        let entries: Vec<&ManifestEntry> = m.entries.iter().filter(|e| splits.contains(&e.split)).collect();
        let clips = entries
            .par_iter()
            .map(|e| load_clip(m, e, source, video_fps))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_names: m.class_names.clone(),
            clips,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn clips(&self, split: Split) -> impl Iterator<Item = &ClipData> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    /// Aligned samples of `split`, clip by clip in manifest order.
    pub fn samples(&self, split: Split) -> Result<Vec<AlignedSample>> {
        let mut out = Vec::new();
        for c in self.clips(split) {
            out.extend(c.samples()?);
        }
        Ok(out)
    }

    pub fn feature_bins(&self) -> Option<usize> {
        self.clips.first().and_then(|c| c.audio.first()).map(|f| f.bins)
    }
}

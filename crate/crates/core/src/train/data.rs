//! Flat sample tables and batch assembly.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::dataset::{augment_image, AlignedSample, AugmentConfig, ImageTensor, VisualInput};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::model::{AVModel, Encoded, ModelInput};
use crate::nn::Tensor;
use crate::seed::{self, Purpose};

pub const INFER_BATCH: usize = 256;

#[derive(Debug, Clone)]
pub enum AudioData {
    Frames(Vec<Arc<FeatureMatrix>>),
    /// `N x D` rows.
    Embedded(Arc<Tensor<f32>>),
}

#[derive(Debug, Clone)]
pub enum VisualData {
    Images(Vec<Arc<ImageTensor>>),
    Embedded(Arc<Tensor<f32>>),
}

/// Augmentation of raw images for one pass over the data.
#[derive(Debug, Clone, Copy)]
pub struct AugmentPass<'a> {
    pub cfg: &'a AugmentConfig,
    pub root_seed: u64,
    /// Distinguishes passes (stage and epoch).
    pub pass: u64,
}

#[derive(Debug, Clone)]
pub struct Samples {
    pub labels: Vec<usize>,
    /// Index into `clip_ids` for each sample.
    pub clip: Vec<usize>,
    /// Whole second of the acoustic frame centre.
    pub second: Vec<usize>,
    pub clip_ids: Vec<String>,
    pub audio: Option<AudioData>,
    pub visual: Option<VisualData>,
}

fn rows(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let w = t.dims()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::from_vec(&[idx.len(), w], data)
}

impl Samples {
    pub fn from_aligned(samples: &[AlignedSample]) -> Result<Self> {
        let mut clip_index: HashMap<&str, usize> = HashMap::new();
        let mut clip_ids = Vec::new();
        let mut clip = Vec::with_capacity(samples.len());
        for s in samples {
            let next = clip_ids.len();
            let i = *clip_index.entry(s.clip_id.as_str()).or_insert_with(|| {
                clip_ids.push(s.clip_id.clone());
                next
            });
            clip.push(i);
        }
        let visual = if samples.iter().all(|s| matches!(s.visual, VisualInput::Image(_))) {
            VisualData::Images(
                samples
                    .iter()
                    .map(|s| match &s.visual {
                        VisualInput::Image(im) => im.clone(),
                        VisualInput::Embedding(_) => unreachable!(),
                    })
                    .collect(),
            )
        } else {
            let mut data = Vec::new();
            let mut width = None;
            for s in samples {
                let VisualInput::Embedding(e) = &s.visual else {
                    return Err(Error::input("samples mix images and visual embeddings"));
                };
                if *width.get_or_insert(e.len()) != e.len() {
                    return Err(Error::input("visual embeddings differ in width"));
                }
                data.extend_from_slice(e);
            }
            VisualData::Embedded(Arc::new(Tensor::from_vec(&[samples.len(), width.unwrap_or(0)], data)?))
        };
        Ok(Self {
            labels: samples.iter().map(|s| s.label).collect(),
            clip,
            second: samples.iter().map(AlignedSample::second).collect(),
            clip_ids,
            audio: Some(AudioData::Frames(samples.iter().map(|s| s.audio.clone()).collect())),
            visual: Some(visual),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same samples with only the requested modalities.
    pub fn restrict(&self, audio: bool, visual: bool) -> Samples {
        Samples {
            audio: if audio { self.audio.clone() } else { None },
            visual: if visual { self.visual.clone() } else { None },
            ..self.clone()
        }
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Model input for the samples `idx`. Raw images are augmented when
    /// `augment` is given, each sample from its own seeded stream.
    pub fn input(&self, idx: &[usize], augment: Option<AugmentPass<'_>>) -> Result<ModelInput<f32>> {
        let audio = match &self.audio {
            None => None,
            Some(AudioData::Embedded(t)) => Some(Encoded::Embedded(rows(t, idx)?)),
            Some(AudioData::Frames(f)) => {
                let width = f[idx[0]].data.len();
                let bins = f[idx[0]].bins;
                let mut data = Vec::with_capacity(idx.len() * width);
                for &i in idx {
                    if f[i].data.len() != width {
                        return Err(Error::input("acoustic frames differ in width"));
                    }
                    data.extend_from_slice(&f[i].data);
                }
                Some(Encoded::Raw(Tensor::from_vec(&[idx.len(), 2, bins], data)?))
            }
        };
        let visual = match &self.visual {
            None => None,
            Some(VisualData::Embedded(t)) => Some(Encoded::Embedded(rows(t, idx)?)),
            Some(VisualData::Images(ims)) => {
                let (h, w) = (ims[idx[0]].height(), ims[idx[0]].width());
                if idx.iter().any(|&i| ims[i].height() != h || ims[i].width() != w) {
                    return Err(Error::input("images differ in size"));
                }
                let pixels: Vec<Vec<f32>> = idx
                    .par_iter()
                    .map(|&i| match augment {
                        Some(a) => {
                            let mut rng = seed::rng(a.root_seed, Purpose::Augment, a.pass, i as u64);
                            augment_image(&ims[i], a.cfg, &mut rng).data().to_vec()
                        }
                        None => ims[i].data().to_vec(),
                    })
                    .collect();
                Some(Encoded::Raw(Tensor::from_vec(&[idx.len(), 3, h, w], pixels.concat())?))
            }
        };
        Ok(ModelInput { audio, visual })
    }

    /// Replaces every raw modality by its embedding under `model`, computed
    /// once without augmentation.
    pub fn embedded(&self, model: &AVModel<f32>) -> Result<Samples> {
        let chunks: Vec<Vec<usize>> = (0..self.len()).collect::<Vec<_>>().chunks(INFER_BATCH).map(<[usize]>::to_vec).collect();
        let parts = chunks
            .par_iter()
            .map(|idx| model.embed(&self.input(idx, None)?))
            .collect::<Result<Vec<_>>>()?;
        let stack = |pick: &dyn Fn(&(Option<Tensor<f32>>, Option<Tensor<f32>>)) -> Option<&Tensor<f32>>| -> Result<Option<Arc<Tensor<f32>>>> {
            let Some(first) = parts.first().and_then(pick) else {
                return Ok(None);
            };
            let w = first.dims()[1];
            let data: Vec<f32> = parts.iter().filter_map(pick).flat_map(|t| t.data().iter().copied()).collect();
            Ok(Some(Arc::new(Tensor::from_vec(&[self.len(), w], data)?)))
        };
        let a = stack(&|p| p.0.as_ref())?;
        let v = stack(&|p| p.1.as_ref())?;
        Ok(Samples {
            audio: a.map(AudioData::Embedded),
            visual: v.map(VisualData::Embedded),
            ..self.clone()
        })
    }
}

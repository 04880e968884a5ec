use std::sync::Arc;

use crate::dataset::image::ImageTensor;
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};

/// Visual half of a sample: a raw image or a precomputed VE embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualInput {
    Image(Arc<ImageTensor>),
    Embedding(Arc<[f32]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub audio: Arc<FeatureMatrix>,
    pub visual: VisualInput,
    pub label: usize,
    pub clip_id: String,
    pub frame_index: usize,
}

impl AlignedSample {
    pub fn second(&self) -> usize {
        self.audio.second()
    }
}

/// Index into `visual` for an acoustic frame centred at `center` seconds:
/// the last image whose second is `<= floor(center)`.
pub fn visual_index(center: f64, visual: &[ImageTensor]) -> usize {
    let s = center.floor().max(0.0) as usize;
    visual.partition_point(|im| im.second_index <= s).saturating_sub(1)
}

/// Pairs every acoustic frame with the 1 fps image of its second, clamped to
/// the last image.
pub fn align(audio: &[FeatureMatrix], visual: &[ImageTensor], label: usize) -> Result<Vec<AlignedSample>> {
    let (Some(a0), Some(_)) = (audio.first(), visual.first()) else {
        return Err(Error::input("align needs at least one acoustic frame and one image"));
    };
    let clip_id = &a0.clip_id;
    if let Some(bad) = audio.iter().map(|a| &a.clip_id).chain(visual.iter().map(|v| &v.clip_id)).find(|c| *c != clip_id) {
        return Err(Error::input(format!("clip id mismatch: {clip_id:?} vs {bad:?}")));
    }
    if visual.windows(2).any(|w| w[0].second_index >= w[1].second_index) {
        return Err(Error::input(format!("images of clip {clip_id:?} are not in increasing second order")));
    }
    let images: Vec<Arc<ImageTensor>> = visual.iter().cloned().map(Arc::new).collect();
    Ok(audio
        .iter()
        .map(|a| AlignedSample {
            audio: Arc::new(a.clone()),
            visual: VisualInput::Image(images[visual_index(a.frame_center_time, visual)].clone()),
            label,
            clip_id: clip_id.clone(),
            frame_index: a.frame_index,
        })
        .collect())
}

//! Segment-level evaluation: frame probabilities are averaged within each
//! whole second of a clip, then log-loss and accuracy are averaged per class.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, IoContext, Result};
use crate::model::AVModel;
use crate::nn::ops;
use crate::train::data::{Samples, INFER_BATCH};

pub const PROB_FLOOR: f64 = 1e-15;

/// Anything producing a probability row per sample.
pub trait Predictor: Sync {
    fn n_classes(&self) -> usize;
    fn predict(&self, samples: &Samples) -> Result<Vec<Vec<f64>>>;
}

/// Assigns `1/K` to every class.
#[derive(Debug, Clone, Copy)]
pub struct UniformPredictor {
    pub k: usize,
}

impl Predictor for UniformPredictor {
    fn n_classes(&self) -> usize {
        self.k
    }

    fn predict(&self, samples: &Samples) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0 / self.k as f64; self.k]; samples.len()])
    }
}

impl Predictor for AVModel<f32> {
    fn n_classes(&self) -> usize {
        AVModel::n_classes(self)
    }

    /// Eval-mode forward in fixed chunks; softmax is taken in f64.
    fn predict(&self, samples: &Samples) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = (0..samples.len()).collect();
        let parts = idx
            .par_chunks(INFER_BATCH)
            .map(|chunk| {
                let (logits, _) = self.forward(&samples.input(chunk, None)?, &mut crate::nn::Phase::Infer)?;
                let p = ops::softmax(&logits.cast::<f64>())?;
                Ok(p.rows().map(<[f64]>::to_vec).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    pub clip_id: String,
    pub second: usize,
    pub label: usize,
    pub n_frames: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `NaN` for classes without test segments.
    pub per_class_logloss: Vec<f64>,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_segments: Vec<usize>,
    /// Means over the classes that have segments.
    pub avg_logloss: f64,
    pub avg_accuracy: f64,
    pub n_segments: usize,
    pub segments: Vec<SegmentRow>,
}

/// Lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Groups frame rows into `(clip, second)` segments and scores them.
pub fn segment_report(samples: &Samples, probs: &[Vec<f64>], k: usize) -> Result<EvalReport> {
    if probs.len() != samples.len() {
        return Err(Error::state(format!("{} probability rows for {} samples", probs.len(), samples.len())));
    }
    if samples.is_empty() {
        return Err(Error::input("nothing to evaluate"));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..samples.len() {
        groups.entry((samples.clip[i], samples.second[i])).or_default().push(i);
    }
    let mut segments = Vec::with_capacity(groups.len());
    for ((clip, second), members) in groups {
        if members.is_empty() {
            warn!("segment {second} of clip {} has no frames; skipped", samples.clip_ids[clip]);
            continue;
        }
        let label = samples.labels[members[0]];
        if members.iter().any(|&i| samples.labels[i] != label) {
            return Err(Error::input(format!("clip {} has frames with different labels", samples.clip_ids[clip])));
        }
        let mut mean = vec![0.0; k];
        // running mean
        for (j, &i) in members.iter().enumerate() {
            if probs[i].len() != k {
                return Err(Error::state(format!("probability row of width {}, expected {k}", probs[i].len())));
            }
            let w = 1.0 / (j + 1) as f64;
            for (m, &p) in mean.iter_mut().zip(&probs[i]) {
                *m += (p - *m) * w;
            }
        }
        let total: f64 = mean.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            mean.iter_mut().for_each(|m| *m /= total);
        }
        segments.push(SegmentRow {
            clip_id: samples.clip_ids[clip].clone(),
            second,
            label,
            n_frames: members.len(),
            probs: mean,
        });
    }
    let mut loss = vec![0.0; k];
    let mut correct = vec![0usize; k];
    let mut count = vec![0usize; k];
    for s in &segments {
        if s.label >= k {
            return Err(Error::input(format!("label {} outside {k} classes", s.label)));
        }
        loss[s.label] += -s.probs[s.label].max(PROB_FLOOR).ln();
        correct[s.label] += usize::from(argmax(&s.probs) == s.label);
        count[s.label] += 1;
    }
    let per_class_logloss: Vec<f64> = (0..k).map(|c| if count[c] > 0 { loss[c] / count[c] as f64 } else { f64::NAN }).collect();
    let per_class_accuracy: Vec<f64> = (0..k).map(|c| if count[c] > 0 { correct[c] as f64 / count[c] as f64 } else { f64::NAN }).collect();
    let present: Vec<usize> = (0..k).filter(|&c| count[c] > 0).collect();
    let mean = |v: &[f64]| present.iter().map(|&c| v[c]).sum::<f64>() / present.len() as f64;
    Ok(EvalReport {
        avg_logloss: mean(&per_class_logloss),
        avg_accuracy: mean(&per_class_accuracy),
        per_class_logloss,
        per_class_accuracy,
        per_class_segments: count,
        n_segments: segments.len(),
        segments,
    })
}

pub fn evaluate(p: &dyn Predictor, samples: &Samples) -> Result<EvalReport> {
    let probs = p.predict(samples)?;
    segment_report(samples, &probs, p.n_classes())
}

impl EvalReport {
    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "segments\t{}", self.n_segments);
        let _ = writeln!(out, "avg_logloss\t{:.6}", self.avg_logloss);
        let _ = writeln!(out, "avg_accuracy\t{:.6}", self.avg_accuracy);
        let _ = writeln!(out);
        let _ = writeln!(out, "class\tsegments\tlogloss\taccuracy");
        for c in 0..self.per_class_logloss.len() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = writeln!(
                out,
                "{name}\t{}\t{:.6}\t{:.6}",
                self.per_class_segments[c], self.per_class_logloss[c], self.per_class_accuracy[c]
            );
        }
        out
    }

    pub fn write(&self, path: &Path, class_names: &[String]) -> Result<()> {
        std::fs::write(path, self.to_text(class_names)).at(path)
    }

    /// One row per segment with its averaged probabilities.
    pub fn write_segments(&self, path: &Path) -> Result<()> {
        let k = self.per_class_logloss.len();
        let mut out = String::from("clip_id\tsecond\tlabel\tframes");
        for c in 0..k {
            let _ = write!(out, "\tp{c}");
        }
        out.push('\n');
        for s in &self.segments {
            let _ = write!(out, "{}\t{}\t{}\t{}", s.clip_id, s.second, s.label, s.n_frames);
            for p in &s.probs {
                let _ = write!(out, "\t{p}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).at(path)
    }
}

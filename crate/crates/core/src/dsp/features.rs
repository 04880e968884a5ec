use log::warn;

use crate::dsp::filterbank::{apply_filterbank, ConstantQDesign, FilterBank, FilterBankDesign, MelDesign};
use crate::dsp::resample::resample;
use crate::dsp::stft::{Stft, StftConfig};
use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const SCALOGRAM_BINS: usize = 290;
pub const FBANK_BINS: usize = 256;
pub const DEFAULT_LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Scalogram,
    Fbank,
}

impl FeatureKind {
    pub fn n_bins(self) -> usize {
        match self {
            FeatureKind::Scalogram => SCALOGRAM_BINS,
            FeatureKind::Fbank => FBANK_BINS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Scalogram => "scalogram",
            FeatureKind::Fbank => "fbank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scalogram" => Ok(FeatureKind::Scalogram),
            "fbank" => Ok(FeatureKind::Fbank),
            other => Err(Error::config(format!("unknown feature kind {other:?}"))),
        }
    }

    pub fn design(self) -> Box<dyn FilterBankDesign> {
        match self {
            FeatureKind::Scalogram => Box::new(ConstantQDesign::new(SCALOGRAM_BINS)),
            FeatureKind::Fbank => Box::new(MelDesign { n_bins: FBANK_BINS }),
        }
    }
}

/// One acoustic frame: row 0 holds the average channel, row 1 the difference
/// channel, each with `bins` log filterbank energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Vec<f32>,
    pub bins: usize,
    pub clip_id: String,
    pub frame_index: usize,
    pub frame_center_time: f64,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f32>, bins: usize, clip_id: impl Into<String>, frame_index: usize, frame_center_time: f64) -> Result<Self> {
        if data.len() != 2 * bins {
            return Err(Error::input(format!(
                "feature frame needs 2 x {bins} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite feature in frame {frame_index}")));
        }
        Ok(Self {
            data,
            bins,
            clip_id: clip_id.into(),
            frame_index,
            frame_center_time,
        })
    }

    pub fn average(&self) -> &[f32] {
        &self.data[..self.bins]
    }

    pub fn difference(&self) -> &[f32] {
        &self.data[self.bins..]
    }

    /// Index of the 1-second segment containing this frame's centre.
    pub fn second(&self) -> usize {
        self.frame_center_time.floor().max(0.0) as usize
    }
}

/// `(L + R) / 2` and `(L - R) / 2`.
pub fn to_avg_diff(w: &Waveform) -> Result<Waveform> {
    if w.n_channels() != 2 {
        return Err(Error::input(format!(
            "average/difference needs 2 channels, got {}",
            w.n_channels()
        )));
    }
    let (l, r) = (w.channel(0), w.channel(1));
    let avg = l.iter().zip(r).map(|(a, b)| (a + b) / 2.0).collect();
    let diff = l.iter().zip(r).map(|(a, b)| (a - b) / 2.0).collect();
    Waveform::stereo(avg, diff, w.sample_rate())
}

/// STFT plan plus filterbank, built once and reused across clips.
pub struct FeatureExtractor {
    kind: FeatureKind,
    stft: Stft,
    bank: FilterBank,
    log_floor: f64,
}

impl FeatureExtractor {
    pub fn new(kind: FeatureKind, cfg: &StftConfig, log_floor: f64) -> Result<Self> {
        Self::with_design(kind, kind.design().as_ref(), cfg, log_floor)
    }

    pub fn with_design(kind: FeatureKind, design: &dyn FilterBankDesign, cfg: &StftConfig, log_floor: f64) -> Result<Self> {
        let stft = Stft::new(cfg)?;
        let bank = design.build(cfg.n_fft_bins(), cfg.sample_rate)?;
        if !(log_floor > 0.0) {
            return Err(Error::config("log floor must be positive"));
        }
        Ok(Self {
            kind,
            stft,
            bank,
            log_floor,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn n_bins(&self) -> usize {
        self.bank.n_bins()
    }

    pub fn extract(&self, clip: &Waveform, clip_id: &str) -> Result<Vec<FeatureMatrix>> {
        let cfg = self.stft.config();
        let clip = if clip.sample_rate() != cfg.sample_rate {
            resample(clip, cfg.sample_rate)?
        } else {
            clip.clone()
        };
        let stereo = if clip.n_channels() == 1 {
            warn!("clip {clip_id} is mono; duplicating the channel");
            let c = clip.channel(0).to_vec();
            Waveform::stereo(c.clone(), c, clip.sample_rate())?
        } else {
            clip
        };
        let ad = to_avg_diff(&stereo)?;
        let rows: Vec<_> = (0..2)
            .map(|c| {
                let spec = self.stft.magnitude(ad.channel(c))?;
                apply_filterbank(&spec, &self.bank, self.log_floor)
            })
            .collect::<Result<_>>()?;
        let bins = self.n_bins();
        (0..rows[0].rows)
            .map(|t| {
                let mut data = Vec::with_capacity(2 * bins);
                data.extend(rows[0].row(t).iter().map(|&v| v as f32));
                data.extend(rows[1].row(t).iter().map(|&v| v as f32));
                FeatureMatrix::new(data, bins, clip_id, t, cfg.frame_center_time(t))
            })
            .collect()
    }
}

pub fn extract_features(clip: &Waveform, kind: FeatureKind, cfg: &StftConfig, clip_id: &str) -> Result<Vec<FeatureMatrix>> {
    FeatureExtractor::new(kind, cfg, DEFAULT_LOG_FLOOR)?.extract(clip, clip_id)
}

//! Flat `section.key = value` configuration covering every module. Unknown
//! keys are rejected; [`Config::resolved`] echoes every value, defaults
//! included, in the same syntax.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{ConfusionMode, SyntheticSpec};
use crate::dsp::features::DEFAULT_LOG_FLOOR;
use crate::dsp::{FeatureKind, StftConfig, WindowFn};
use crate::error::{Error, IoContext, Result};
use crate::model::{AcousticEncoderCfg, ModelConfig};
use crate::train::{AeInit, Strategy, TrainConfig, VeInit};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub stft: StftConfig,
    pub feature_kind: FeatureKind,
    pub log_floor: f64,
    /// Rate at which clip frames are stored before downsampling to 1 fps.
    pub video_fps: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ve_checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    pub synth: SyntheticSpec,
    pub val_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            feature_kind: FeatureKind::Scalogram,
            log_floor: DEFAULT_LOG_FLOOR,
            video_fps: 1.0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ve_checkpoint: None,
            seed: None,
            synth: SyntheticSpec::default(),
            val_fraction: 0.1,
        }
    }
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<V: Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Parse config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `section.key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), strip(e))))
    }

    /// Set one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        let a = &mut t.augment;
        let s = &mut self.synth;
        match key {
            "stft.sample_rate" => self.stft.sample_rate = num(key, v)?,
            "stft.window_ms" => self.stft.window_ms = num(key, v)?,
            "stft.hop_ms" => self.stft.hop_ms = num(key, v)?,
            "stft.window" => self.stft.window_fn = WindowFn::parse(v)?,
            "features.kind" => {
                self.feature_kind = FeatureKind::parse(v)?;
                m.ae.in_bins = self.feature_kind.n_bins();
            }
            "features.log_floor" => self.log_floor = num(key, v)?,
            "video.fps" => self.video_fps = num(key, v)?,
            "augment.enabled" => a.enabled = boolean(key, v)?,
            "augment.crop_min" => a.crop_scale_range.0 = num(key, v)?,
            "augment.crop_max" => a.crop_scale_range.1 = num(key, v)?,
            "augment.hflip_prob" => a.hflip_prob = num(key, v)?,
            "augment.jitter" => a.jitter_strength = num(key, v)?,
            "ae.channels" => m.ae.channels = list(key, v)?,
            "ae.fc1" => m.ae.fc1 = num(key, v)?,
            "ae.fc2" => m.ae.fc2 = num(key, v)?,
            "ae.dropout" => m.ae.dropout = num(key, v)?,
            "ae.residual_shortcut" => m.ae.residual_shortcut = boolean(key, v)?,
            "ae.input_concat" => m.ae.input_concat = boolean(key, v)?,
            "ve.channels" => m.ve.channels = list(key, v)?,
            "ve.image_size" => m.ve.image_size = num(key, v)?,
            "sc.hidden" => m.sc.hidden = num(key, v)?,
            "sc.dropout" => m.sc.dropout = num(key, v)?,
            "train.strategy" => t.strategy = Strategy::parse(v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.max_epochs" => t.max_epochs = num(key, v)?,
            "train.lr_max" => t.schedule.lr_max = num(key, v)?,
            "train.lr_min" => t.schedule.lr_min = num(key, v)?,
            "train.restart_t0" => t.schedule.t0 = num(key, v)?,
            "train.restart_mult" => t.schedule.mult = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.patience" => t.patience = num(key, v)?,
            "train.ae_init" => {
                t.ae_init = match v {
                    "audio_only" => AeInit::AudioOnly,
                    "scratch" => AeInit::Scratch,
                    _ => return Err(Error::config(format!("{key}: expected audio_only or scratch, got {v:?}"))),
                }
            }
            "train.ve_init" => {
                t.ve_init = match v {
                    "pretrain" => VeInit::Pretrain,
                    "random" => VeInit::Random,
                    "checkpoint" => VeInit::Checkpoint(self.ve_checkpoint.clone().unwrap_or_default()),
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected pretrain, random or checkpoint, got {v:?}"
                        )))
                    }
                }
            }
            "train.ve_checkpoint" => {
                let p = PathBuf::from(v);
                if let VeInit::Checkpoint(c) = &mut t.ve_init {
                    *c = p.clone();
                }
                self.ve_checkpoint = Some(p);
            }
            "train.ve_pretrain_epochs" => t.ve_pretrain_epochs = num(key, v)?,
            "train.seed" => self.seed = Some(num(key, v)?),
            "split.val_fraction" => self.val_fraction = num(key, v)?,
            "synth.n_classes" => s.n_classes = num(key, v)?,
            "synth.clips_per_class" => s.clips_per_class = num(key, v)?,
            "synth.clip_seconds" => s.clip_seconds = num(key, v)?,
            "synth.sample_rate" => s.sample_rate = num(key, v)?,
            "synth.image_size" => s.image_size = num(key, v)?,
            "synth.snr_db" => s.snr_db = num(key, v)?,
            "synth.tone_presence" => s.tone_presence = num(key, v)?,
            "synth.distractor_tones" => s.distractor_tones = num(key, v)?,
            "synth.image_noise" => s.image_noise = num(key, v)?,
            "synth.hue_jitter" => s.hue_jitter = num(key, v)?,
            "synth.confusion_mode" => s.confusion_mode = ConfusionMode::parse(v)?,
            "synth.test_fraction" => s.test_fraction = num(key, v)?,
            "synth.val_fraction" => s.val_fraction = num(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.train.validate()?;
        self.model.ae.validate()?;
        self.synth.validate()?;
        if !(self.video_fps >= 1.0 && self.video_fps.is_finite()) {
            return Err(Error::config(format!("video.fps {} must be >= 1", self.video_fps)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!("split.val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if matches!(&self.train.ve_init, VeInit::Checkpoint(p) if p.as_os_str().is_empty()) {
            return Err(Error::config("train.ve_init = checkpoint needs train.ve_checkpoint"));
        }
        Ok(())
    }

    /// Every key with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m = &self.model;
        let a = &t.augment;
        let s = &self.synth;
        let mut out = vec![
            ("stft.sample_rate", self.stft.sample_rate.to_string()),
            ("stft.window_ms", self.stft.window_ms.to_string()),
            ("stft.hop_ms", self.stft.hop_ms.to_string()),
            ("stft.window", self.stft.window_fn.name().to_string()),
            ("features.kind", self.feature_kind.name().to_string()),
            ("features.log_floor", self.log_floor.to_string()),
            ("video.fps", self.video_fps.to_string()),
            ("augment.enabled", a.enabled.to_string()),
            ("augment.crop_min", a.crop_scale_range.0.to_string()),
            ("augment.crop_max", a.crop_scale_range.1.to_string()),
            ("augment.hflip_prob", a.hflip_prob.to_string()),
            ("augment.jitter", a.jitter_strength.to_string()),
            ("ae.channels", join(&m.ae.channels)),
            ("ae.fc1", m.ae.fc1.to_string()),
            ("ae.fc2", m.ae.fc2.to_string()),
            ("ae.dropout", m.ae.dropout.to_string()),
            ("ae.residual_shortcut", m.ae.residual_shortcut.to_string()),
            ("ae.input_concat", m.ae.input_concat.to_string()),
            ("ve.channels", join(&m.ve.channels)),
            ("ve.image_size", m.ve.image_size.to_string()),
            ("sc.hidden", m.sc.hidden.to_string()),
            ("sc.dropout", m.sc.dropout.to_string()),
            ("train.strategy", t.strategy.name().to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.lr_max", t.schedule.lr_max.to_string()),
            ("train.lr_min", t.schedule.lr_min.to_string()),
            ("train.restart_t0", t.schedule.t0.to_string()),
            ("train.restart_mult", t.schedule.mult.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.patience", t.patience.to_string()),
            (
                "train.ae_init",
                match t.ae_init {
                    AeInit::AudioOnly => "audio_only",
                    AeInit::Scratch => "scratch",
                }
                .to_string(),
            ),
        ];
        if let Some(p) = &self.ve_checkpoint {
            out.push(("train.ve_checkpoint", p.display().to_string()));
        }
        out.push((
            "train.ve_init",
            match &t.ve_init {
                VeInit::Pretrain => "pretrain",
                VeInit::Random => "random",
                VeInit::Checkpoint(_) => "checkpoint",
            }
            .to_string(),
        ));
        out.push(("train.ve_pretrain_epochs", t.ve_pretrain_epochs.to_string()));
        if let Some(seed) = self.seed {
            out.push(("train.seed", seed.to_string()));
        }
        out.extend([
            ("split.val_fraction", self.val_fraction.to_string()),
            ("synth.n_classes", s.n_classes.to_string()),
            ("synth.clips_per_class", s.clips_per_class.to_string()),
            ("synth.clip_seconds", s.clip_seconds.to_string()),
            ("synth.sample_rate", s.sample_rate.to_string()),
            ("synth.image_size", s.image_size.to_string()),
            ("synth.snr_db", s.snr_db.to_string()),
            ("synth.tone_presence", s.tone_presence.to_string()),
            ("synth.distractor_tones", s.distractor_tones.to_string()),
            ("synth.image_noise", s.image_noise.to_string()),
            ("synth.hue_jitter", s.hue_jitter.to_string()),
            ("synth.confusion_mode", s.confusion_mode.name().to_string()),
            ("synth.test_fraction", s.test_fraction.to_string()),
            ("synth.val_fraction", s.val_fraction.to_string()),
        ]);
        out
    }

    /// Fully resolved configuration in the input syntax.
    pub fn resolved(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Model configuration for `n_classes` classes.
    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        ModelConfig {
            ae: AcousticEncoderCfg {
                in_bins: self.feature_kind.n_bins(),
                ..self.model.ae.clone()
            },
            n_classes,
            ..self.model.clone()
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidConfig(m) => m,
        other => other.to_string(),
    }
}

//! Training strategies, the ablation grid, evaluation and embedding export.
//!
//! Every strategy runs through [`fit`]. A joint run is the ablation cell
//! `(raw image, trainable AE)` and a pipeline run is `(embedding, pretrained
//! AE)`, so the equivalences between them hold by construction.

pub mod data;
pub mod eval;
pub mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};

pub use data::{AudioData, AugmentPass, Samples, VisualData};
pub use eval::{argmax, evaluate, segment_report, EvalReport, Predictor, SegmentRow, UniformPredictor};
pub use optim::{lr_at, sgd_step, Schedule, Sgd};

use crate::dataset::{batches, AugmentConfig, Corpus, Split};
use crate::error::{Error, IoContext, Result};
use crate::model::{build_model, AVModel, Mode, ModelConfig, SceneClassifier, SceneClassifierCfg, VisualEncoder};
use crate::nn::{ops, Group, ParamStore, Phase, Tensor};
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Joint,
    Pipeline,
    AudioOnly,
    VideoOnly,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "pipeline" => Ok(Self::Pipeline),
            "audio" | "audio_only" => Ok(Self::AudioOnly),
            "video" | "video_only" => Ok(Self::VideoOnly),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::Pipeline => "pipeline",
            Self::AudioOnly => "audio",
            Self::VideoOnly => "video",
        }
    }
}

/// Where the AE of trainable-AE fusion runs starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AeInit {
    AudioOnly,
    Scratch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VeInit {
    /// Train on the video-only task, then drop the head.
    Pretrain,
    Random,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Embedding,
    RawImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AeMode {
    Pretrained,
    Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationCell {
    I,
    II,
    III,
    IV,
}

impl AblationCell {
    pub const ALL: [AblationCell; 4] = [Self::I, Self::II, Self::III, Self::IV];

    pub fn axes(self) -> (InputKind, AeMode) {
        match self {
            Self::I => (InputKind::Embedding, AeMode::Pretrained),
            Self::II => (InputKind::Embedding, AeMode::Trainable),
            Self::III => (InputKind::RawImage, AeMode::Pretrained),
            Self::IV => (InputKind::RawImage, AeMode::Trainable),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub patience: usize,
    pub augment: AugmentConfig,
    pub ae_init: AeInit,
    pub ve_init: VeInit,
    pub ve_pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Joint,
            batch_size: 256,
            max_epochs: 150,
            schedule: Schedule::default(),
            momentum: 0.9,
            patience: 20,
            augment: AugmentConfig::default(),
            ae_init: AeInit::AudioOnly,
            ve_init: VeInit::Pretrain,
            ve_pretrain_epochs: 15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, max_epochs and patience must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Seed namespaces of the training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Audio = 1,
    Fusion = 2,
    Video = 3,
    VisualPretrain = 4,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Audio => "audio",
            Stage::Fusion => "fusion",
            Stage::Video => "video",
            Stage::VisualPretrain => "visual_pretrain",
        }
    }

    fn pass(self, epoch: usize) -> u64 {
        ((self as u64) << 32) | epoch as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: &'static str,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub model: AVModel<f32>,
    pub log: Vec<EpochRecord>,
    /// Wall-clock milliseconds per logged epoch.
    pub wall_ms: Vec<u128>,
    pub best_val_loss: f64,
}

pub struct TrainData {
    pub class_names: Vec<String>,
    pub train: Samples,
    pub val: Samples,
}

impl TrainData {
    pub fn from_corpus(c: &Corpus) -> Result<Self> {
        let train = c.samples(Split::Train)?;
        let val = c.samples(Split::Val)?;
        if train.len() < 2 {
            return Err(Error::input("training needs at least 2 train frames"));
        }
        if val.is_empty() {
            return Err(Error::input("no val clips; run `avjoint split` first"));
        }
        Ok(Self {
            class_names: c.class_names.clone(),
            train: Samples::from_aligned(&train)?,
            val: Samples::from_aligned(&val)?,
        })
    }
}

/// Trains every trainable parameter of `model` and keeps the weights with
/// the lowest segment-level validation log-loss.
pub fn fit(
    mut model: AVModel<f32>,
    train: &Samples,
    val: &Samples,
    augment: Option<&AugmentConfig>,
    cfg: &TrainConfig,
    root_seed: u64,
    stage: Stage,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::input("training needs at least 2 samples"));
    }
    let mut sgd = Sgd::new(cfg.momentum);
    let mut log = Vec::new();
    let mut wall_ms = Vec::new();
    let mut best: Option<(f64, AVModel<f32>)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let pass = stage.pass(epoch);
        let order = batches(train.len(), cfg.batch_size, seed::derive(root_seed, Purpose::Shuffle, pass, 0))?;
        let n_batches = order.len();
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in order.iter().enumerate() {
            if idx.len() < 2 {
                debug!("{} epoch {epoch}: skipping singleton batch", stage.name());
                continue;
            }
            let lr = lr_at(epoch as f64 + b as f64 / n_batches as f64, &cfg.schedule);
            let aug = augment.map(|a| AugmentPass {
                cfg: a,
                root_seed,
                pass,
            });
            let input = train.input(idx, aug)?;
            let labels = train.labels_of(idx);
            let mut rng = seed::rng(root_seed, Purpose::Dropout, pass, b as u64);
            let (logits, cache) = model.forward(&input, &mut Phase::Train(&mut rng))?;
            let (loss, probs) = ops::softmax_cross_entropy(&logits, &labels).map_err(|e| Error::Training {
                epoch,
                batch: b,
                message: e.to_string(),
            })?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    message: format!("loss is {loss}"),
                });
            }
            let dlogits = ops::softmax_cross_entropy_backward(&probs, &labels)?;
            model.backward(&cache, &dlogits)?;
            model.commit(&cache);
            sgd.step(&mut model.params, lr)?;
            if !model.params.entries().iter().all(|p| p.value.all_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    message: "non-finite parameter after update".into(),
                });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            seen += idx.len();
        }
        let report = evaluate(&model, val)?;
        if !report.avg_logloss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: n_batches,
                message: format!("validation loss is {}", report.avg_logloss),
            });
        }
        let rec = EpochRecord {
            stage: stage.name(),
            epoch,
            lr: lr_at(epoch as f64, &cfg.schedule),
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss: report.avg_logloss,
            val_acc: report.avg_accuracy,
        };
        info!(
            "{} epoch {epoch}: train {:.4} val {:.4} acc {:.3}",
            stage.name(),
            rec.train_loss,
            rec.val_loss,
            rec.val_acc
        );
        log.push(rec);
        wall_ms.push(started.elapsed().as_millis());
        if best.as_ref().is_none_or(|(l, _)| report.avg_logloss < *l) {
            best = Some((report.avg_logloss, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                info!("{}: early stop after epoch {epoch}", stage.name());
                break;
            }
        }
    }
    let (best_val_loss, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        log,
        wall_ms,
        best_val_loss,
    })
}

/// Distinct 1 fps images of `s` with their labels.
fn unique_images(s: &Samples) -> Result<Samples> {
    let Some(VisualData::Images(_)) = &s.visual else {
        return Err(Error::input("visual pre-training needs raw images"));
    };
    let mut keep = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in 0..s.len() {
        if seen.insert((s.clip[i], s.second[i])) {
            keep.push(i);
        }
    }
    let Some(VisualData::Images(ims)) = &s.visual else { unreachable!() };
    let mut seen_img = std::collections::HashSet::new();
    let keep: Vec<usize> = keep.into_iter().filter(|&i| seen_img.insert(std::sync::Arc::as_ptr(&ims[i]))).collect();
    Ok(Samples {
        labels: keep.iter().map(|&i| s.labels[i]).collect(),
        clip: keep.iter().map(|&i| s.clip[i]).collect(),
        second: keep.iter().map(|&i| s.second[i]).collect(),
        clip_ids: s.clip_ids.clone(),
        audio: None,
        visual: Some(VisualData::Images(keep.iter().map(|&i| ims[i].clone()).collect())),
    })
}

/// Trains a visual encoder plus a throw-away head on the video-only task and
/// returns the store holding both; only the `Ve` group is meant to be kept.
pub fn pretrain_visual_encoder(model_cfg: &ModelConfig, train: &Samples, cfg: &TrainConfig, root_seed: u64) -> Result<ParamStore<f32>> {
    let images = unique_images(train)?;
    let stage = Stage::VisualPretrain;
    let mut init = seed::rng(root_seed, Purpose::VisualPretrain, 0, 0);
    let mut ps = ParamStore::<f32>::new();
    let ve = VisualEncoder::new(&mut ps, &model_cfg.ve, &mut init)?;
    let head_cfg = SceneClassifierCfg {
        hidden: 128,
        dropout: 0.0,
    };
    let head = SceneClassifier::new(&mut ps, "aux", Group::Aux, ve.out_width(), &head_cfg, model_cfg.n_classes, &mut init)?;
    let mut sgd = Sgd::new(cfg.momentum);
    let batch = cfg.batch_size.min(images.len()).max(2);
    for epoch in 0..cfg.ve_pretrain_epochs {
        let pass = stage.pass(epoch);
        let order = batches(images.len(), batch, seed::derive(root_seed, Purpose::Shuffle, pass, 0))?;
        let n_batches = order.len();
        let mut loss_sum = 0.0;
        for (b, idx) in order.iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let lr = lr_at(epoch as f64 + b as f64 / n_batches as f64, &cfg.schedule);
            let aug = AugmentPass {
                cfg: &cfg.augment,
                root_seed,
                pass,
            };
            let Some(crate::model::Encoded::Raw(x)) = images.input(idx, Some(aug))?.visual else {
                unreachable!()
            };
            let labels = images.labels_of(idx);
            let mut rng = seed::rng(root_seed, Purpose::Dropout, pass, b as u64);
            let mut phase = Phase::Train(&mut rng);
            let (emb, vc) = ve.forward(&ps, &x, &phase)?;
            let (logits, hc) = head.forward(&ps, &emb, &mut phase)?;
            let (loss, probs) = ops::softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    message: format!("visual pre-training loss is {loss}"),
                });
            }
            let d = ops::softmax_cross_entropy_backward(&probs, &labels)?;
            let demb = head.backward(&mut ps, &hc, &d, true)?.expect("dx requested");
            ve.backward(&mut ps, &vc, &demb)?;
            ve.commit(&mut ps, &vc);
            head.commit(&mut ps, &hc);
            sgd.step(&mut ps, lr)?;
            loss_sum += loss as f64;
        }
        info!("visual pre-training epoch {epoch}: loss {:.4}", loss_sum / n_batches as f64);
    }
    Ok(ps)
}

/// Shares the visual encoder and the audio-only stage between runs on the
/// same data and seed.
pub struct Session<'a> {
    pub cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    pub seed: u64,
    pub data: &'a TrainData,
    ve: Option<ParamStore<f32>>,
    audio: Option<TrainOutcome>,
}

impl<'a> Session<'a> {
    pub fn new(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &'a TrainData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if model_cfg.n_classes != data.class_names.len() {
            return Err(Error::config(format!(
                "model has {} classes, data {}",
                model_cfg.n_classes,
                data.class_names.len()
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            model_cfg: model_cfg.clone(),
            seed,
            data,
            ve: None,
            audio: None,
        })
    }

    fn init_seed(&self, stage: Stage) -> u64 {
        seed::derive(self.seed, Purpose::Init, stage as u64, 0)
    }

    /// Visual encoder weights, computed on first use.
    pub fn visual_encoder(&mut self) -> Result<&ParamStore<f32>> {
        if self.ve.is_none() {
            let ps = match &self.cfg.ve_init {
                VeInit::Pretrain => pretrain_visual_encoder(&self.model_cfg, &self.data.train, &self.cfg, self.seed)?,
                VeInit::Random => build_model::<f32>(Mode::VideoOnly, &self.model_cfg, self.init_seed(Stage::VisualPretrain))?.params,
                VeInit::Checkpoint(path) => AVModel::<f32>::load(path)?.params,
            };
            self.ve = Some(ps);
        }
        Ok(self.ve.as_ref().expect("just set"))
    }

    fn with_visual(&mut self, mut m: AVModel<f32>) -> Result<AVModel<f32>> {
        let ve = self.visual_encoder()?;
        m.params.copy_group_from(ve, Group::Ve)?;
        Ok(m)
    }

    /// Audio-only AE + SC, computed on first use.
    pub fn audio_stage(&mut self) -> Result<&TrainOutcome> {
        if self.audio.is_none() {
            let m = build_model::<f32>(Mode::AudioOnly, &self.model_cfg, self.init_seed(Stage::Audio))?;
            let out = fit(
                m,
                &self.data.train.restrict(true, false),
                &self.data.val.restrict(true, false),
                None,
                &self.cfg,
                self.seed,
                Stage::Audio,
            )?;
            self.audio = Some(out);
        }
        Ok(self.audio.as_ref().expect("just set"))
    }

    fn video_only(&mut self) -> Result<TrainOutcome> {
        let m = build_model::<f32>(Mode::VideoOnly, &self.model_cfg, self.init_seed(Stage::Video))?;
        let m = self.with_visual(m)?;
        let aug = self.cfg.augment.clone();
        fit(
            m,
            &self.data.train.restrict(false, true),
            &self.data.val.restrict(false, true),
            Some(&aug),
            &self.cfg,
            self.seed,
            Stage::Video,
        )
    }

    /// One cell of the input-kind x AE-mode grid. Its log starts with the
    /// audio-only stage when the AE comes from it.
    pub fn cell(&mut self, cell: AblationCell) -> Result<TrainOutcome> {
        let (input, ae_mode) = cell.axes();
        let mode = match ae_mode {
            AeMode::Pretrained => Mode::AvPipeline,
            AeMode::Trainable => Mode::AvJoint,
        };
        let from_audio = ae_mode == AeMode::Pretrained || self.cfg.ae_init == AeInit::AudioOnly;
        let mut m = build_model::<f32>(mode, &self.model_cfg, self.init_seed(Stage::Fusion))?;
        let mut log = Vec::new();
        let mut wall_ms = Vec::new();
        if from_audio {
            let audio = self.audio_stage()?;
            m.params.copy_group_from(&audio.model.params, Group::Ae)?;
            log.extend(audio.log.iter().cloned());
            wall_ms.extend(audio.wall_ms.iter().copied());
        }
        let m = self.with_visual(m)?;
        let prepare = |s: &Samples| -> Result<Samples> {
            let emb = s.embedded(&m)?;
            Ok(Samples {
                audio: if ae_mode == AeMode::Pretrained { emb.audio } else { s.audio.clone() },
                visual: if input == InputKind::Embedding { emb.visual } else { s.visual.clone() },
                ..s.clone()
            })
        };
        let train = prepare(&self.data.train)?;
        let val = prepare(&self.data.val)?;
        let aug = (input == InputKind::RawImage).then(|| self.cfg.augment.clone());
        let out = fit(m, &train, &val, aug.as_ref(), &self.cfg, self.seed, Stage::Fusion)?;
        log.extend(out.log);
        wall_ms.extend(out.wall_ms);
        Ok(TrainOutcome { log, wall_ms, ..out })
    }

    pub fn train(&mut self, strategy: Strategy) -> Result<TrainOutcome> {
        match strategy {
            Strategy::Joint => self.cell(AblationCell::IV),
            Strategy::Pipeline => self.cell(AblationCell::I),
            Strategy::AudioOnly => Ok(self.audio_stage()?.clone()),
            Strategy::VideoOnly => self.video_only(),
        }
    }

    pub fn run_ablation(&mut self) -> Result<Vec<(AblationCell, TrainOutcome)>> {
        AblationCell::ALL.iter().map(|&c| Ok((c, self.cell(c)?))).collect()
    }
}

pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &TrainData, seed: u64) -> Result<TrainOutcome> {
    Session::new(cfg, model_cfg, data, seed)?.train(cfg.strategy)
}

pub fn train_pipeline(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &TrainData, seed: u64) -> Result<TrainOutcome> {
    Session::new(cfg, model_cfg, data, seed)?.train(Strategy::Pipeline)
}

pub fn run_ablation(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &TrainData, seed: u64) -> Result<Vec<(AblationCell, TrainOutcome)>> {
    Session::new(cfg, model_cfg, data, seed)?.run_ablation()
}

pub const LOG_HEADER: &str = "stage\tepoch\tlr\ttrain_loss\tval_loss\tval_acc";

pub fn log_text(log: &[EpochRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in log {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", r.stage, r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc);
    }
    out
}

pub fn timing_text(log: &[EpochRecord], wall_ms: &[u128]) -> String {
    let mut out = String::from("stage\tepoch\twall_ms\n");
    for (r, ms) in log.iter().zip(wall_ms) {
        let _ = writeln!(out, "{}\t{}\t{ms}", r.stage, r.epoch);
    }
    out
}

/// Per-segment mean embeddings: `e` columns, then the AE and VE parts.
pub fn export_embeddings(model: &AVModel<f32>, samples: &Samples, path: &Path) -> Result<()> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(data::INFER_BATCH) {
        let (a, v) = model.embed(&samples.input(chunk, None)?)?;
        let parts: Vec<&Tensor<f32>> = [a.as_ref(), v.as_ref()].into_iter().flatten().collect();
        let e = Tensor::concat_cols(&parts)?;
        rows.extend(e.rows().map(<[f32]>::to_vec));
    }
    let (da, dv) = (model.ae_width(), model.ve_width());
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for i in 0..samples.len() {
        groups.entry((samples.clip[i], samples.second[i])).or_default().push(i);
    }
    let mut out = String::from("clip_id\tsegment\tlabel");
    for (prefix, n) in [("e", da + dv), ("ae", da), ("ve", dv)] {
        for j in 0..n {
            let _ = write!(out, "\t{prefix}{j}");
        }
    }
    out.push('\n');
    for ((clip, second), members) in groups {
        let width = da + dv;
        let mut mean = vec![0.0f64; width];
        for &i in &members {
            for (m, &x) in mean.iter_mut().zip(&rows[i]) {
                *m += x as f64;
            }
        }
        let mean: Vec<f32> = mean.iter().map(|m| (m / members.len() as f64) as f32).collect();
        let _ = write!(out, "{}\t{second}\t{}", samples.clip_ids[clip], samples.labels[members[0]]);
        for v in mean.iter().chain(&mean[..da]).chain(&mean[da..]) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).at(path)
}

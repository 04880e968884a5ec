//! Acoustic encoder, visual encoder, fusion and scene classifier, wired into
//! the four system variants.

pub mod ae;
pub mod sc;
pub mod ve;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ae::{AcousticEncoder, AcousticEncoderCfg, AeCache};
pub use sc::{SceneClassifier, SceneClassifierCfg, ScCache};
pub use ve::{VisualEncoder, VisualEncoderCfg, VeCache};

use crate::error::{Error, Result};
use crate::nn::{checkpoint, Group, ParamStore, Phase, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    AudioOnly,
    VideoOnly,
    /// AE frozen, SC trained on fused embeddings.
    AvPipeline,
    /// AE and SC trained together through the fused embedding.
    AvJoint,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::AudioOnly => "audio_only",
            Mode::VideoOnly => "video_only",
            Mode::AvPipeline => "av_pipeline",
            Mode::AvJoint => "av_joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "audio_only" => Ok(Mode::AudioOnly),
            "video_only" => Ok(Mode::VideoOnly),
            "av_pipeline" => Ok(Mode::AvPipeline),
            "av_joint" => Ok(Mode::AvJoint),
            other => Err(Error::config(format!("unknown model mode {other:?}"))),
        }
    }

    pub fn has_audio(self) -> bool {
        self != Mode::VideoOnly
    }

    pub fn has_video(self) -> bool {
        self != Mode::AudioOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub ae: AcousticEncoderCfg,
    pub ve: VisualEncoderCfg,
    pub sc: SceneClassifierCfg,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ae: AcousticEncoderCfg::default(),
            ve: VisualEncoderCfg::default(),
            sc: SceneClassifierCfg::default(),
            n_classes: 10,
        }
    }
}

/// One modality of a batch: raw encoder input or a precomputed embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoded<T> {
    Raw(Tensor<T>),
    Embedded(Tensor<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    /// `N x 2 x B` frames or `N x fc2` embeddings.
    pub audio: Option<Encoded<T>>,
    /// `N x 3 x S x S` images or `N x D_v` embeddings.
    pub visual: Option<Encoded<T>>,
}

pub struct ModelCache<T> {
    ae: Option<AeCache<T>>,
    ae_width: usize,
    sc: ScCache<T>,
}

/// `e = ae ⊕ ve`, AE part first.
pub fn fuse<T: Real>(ae: &Tensor<T>, ve: &Tensor<T>) -> Result<Tensor<T>> {
    if ae.rank() != 2 || ve.rank() != 2 || ae.dims()[0] != ve.dims()[0] {
        return Err(Error::input(format!("cannot fuse {:?} with {:?}", ae.dims(), ve.dims())));
    }
    Tensor::concat_cols(&[ae, ve])
}

#[derive(Debug, Clone)]
pub struct AVModel<T> {
    pub mode: Mode,
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    /// Free-form key/value pairs stored alongside the weights.
    pub extra: BTreeMap<String, String>,
    ae: Option<AcousticEncoder>,
    ve: Option<VisualEncoder>,
    sc: SceneClassifier,
}

pub fn build_model<T: Real>(mode: Mode, cfg: &ModelConfig, seed: u64) -> Result<AVModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let ae = mode.has_audio().then(|| AcousticEncoder::new(&mut ps, &cfg.ae, &mut rng)).transpose()?;
    let ve = mode.has_video().then(|| VisualEncoder::new(&mut ps, &cfg.ve, &mut rng)).transpose()?;
    let width = ae.as_ref().map_or(0, AcousticEncoder::out_width) + ve.as_ref().map_or(0, VisualEncoder::out_width);
    let sc = SceneClassifier::new(&mut ps, "sc", Group::Sc, width, &cfg.sc, cfg.n_classes, &mut rng)?;
    ps.set_frozen(Group::Ve, true);
    if mode == Mode::AvPipeline {
        ps.set_frozen(Group::Ae, true);
    }
    Ok(AVModel {
        mode,
        cfg: cfg.clone(),
        params: ps,
        extra: BTreeMap::new(),
        ae,
        ve,
        sc,
    })
}

fn check_width<T: Real>(t: &Tensor<T>, width: usize, what: &str) -> Result<()> {
    if t.rank() != 2 || t.dims()[1] != width {
        return Err(Error::input(format!("{what} embedding must be N x {width}, got {:?}", t.dims())));
    }
    Ok(())
}

impl<T: Real> AVModel<T> {
    pub fn ae(&self) -> Option<&AcousticEncoder> {
        self.ae.as_ref()
    }

    pub fn ve(&self) -> Option<&VisualEncoder> {
        self.ve.as_ref()
    }

    pub fn sc(&self) -> &SceneClassifier {
        &self.sc
    }

    pub fn ae_width(&self) -> usize {
        self.ae.as_ref().map_or(0, AcousticEncoder::out_width)
    }

    pub fn ve_width(&self) -> usize {
        self.ve.as_ref().map_or(0, VisualEncoder::out_width)
    }

    pub fn n_classes(&self) -> usize {
        self.sc.n_classes()
    }

    pub fn ae_trainable(&self) -> bool {
        self.ae.is_some() && !self.params.is_group_frozen(Group::Ae)
    }

    fn embed_audio(&self, audio: &Option<Encoded<T>>) -> Result<Option<Tensor<T>>> {
        Ok(match (&self.ae, audio) {
            (Some(ae), Some(Encoded::Raw(x))) => Some(ae.forward(&self.params, x, &mut Phase::Infer)?.0),
            (Some(ae), Some(Encoded::Embedded(e))) => {
                check_width(e, ae.out_width(), "acoustic")?;
                Some(e.clone())
            }
            (None, None) => None,
            _ => return Err(Error::input(format!("{} model given mismatched audio input", self.mode))),
        })
    }

    fn embed_visual(&self, visual: &Option<Encoded<T>>) -> Result<Option<Tensor<T>>> {
        Ok(match (&self.ve, visual) {
            (Some(ve), Some(Encoded::Raw(x))) => Some(ve.forward(&self.params, x, &Phase::Infer)?.0),
            (Some(ve), Some(Encoded::Embedded(e))) => {
                check_width(e, ve.out_width(), "visual")?;
                Some(e.clone())
            }
            (None, None) => None,
            _ => return Err(Error::input(format!("{} model given mismatched visual input", self.mode))),
        })
    }

    /// Acoustic and visual embeddings, encoders run without caches.
    pub fn embed(&self, input: &ModelInput<T>) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        Ok((self.embed_audio(&input.audio)?, self.embed_visual(&input.visual)?))
    }

    fn fused(a: Option<Tensor<T>>, v: Option<Tensor<T>>) -> Result<Tensor<T>> {
        match (a, v) {
            (Some(a), Some(v)) => fuse(&a, &v),
            (Some(a), None) => Ok(a),
            (None, Some(v)) => Ok(v),
            (None, None) => Err(Error::input("model input carries no modality")),
        }
    }

    /// Logits for a batch. A trainable AE runs in `phase`; frozen encoders
    /// always run with running statistics and no dropout.
    pub fn forward(&self, input: &ModelInput<T>, phase: &mut Phase<'_>) -> Result<(Tensor<T>, ModelCache<T>)> {
        let mut ae_cache = None;
        let a = match (&self.ae, &input.audio) {
            (Some(ae), Some(Encoded::Raw(x))) if self.ae_trainable() => {
                let (e, c) = ae.forward(&self.params, x, phase)?;
                ae_cache = Some(c);
                Some(e)
            }
            _ => self.embed_audio(&input.audio)?,
        };
        let v = self.embed_visual(&input.visual)?;
        let e = Self::fused(a, v)?;
        let (logits, sc) = self.sc.forward(&self.params, &e, phase)?;
        Ok((
            logits,
            ModelCache {
                ae: ae_cache,
                ae_width: self.ae_width(),
                sc,
            },
        ))
    }

    /// Accumulates gradients of every trainable parameter.
    pub fn backward(&mut self, cache: &ModelCache<T>, dlogits: &Tensor<T>) -> Result<()> {
        let need_de = cache.ae.is_some();
        let de = self.sc.backward(&mut self.params, &cache.sc, dlogits, need_de)?;
        if let (Some(ae), Some(c), Some(de)) = (&self.ae, &cache.ae, de) {
            let dae = de.slice_cols(0, cache.ae_width)?;
            ae.backward(&mut self.params, c, &dae, false)?;
        }
        Ok(())
    }

    /// Folds training-mode batch-norm statistics into the running estimates.
    pub fn commit(&mut self, cache: &ModelCache<T>) {
        if let (Some(ae), Some(c)) = (&self.ae, &cache.ae) {
            ae.commit(&mut self.params, c);
        }
        self.sc.commit(&mut self.params, &cache.sc);
    }

    pub fn metadata(&self) -> String {
        let mut m = BTreeMap::new();
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let c = &self.cfg;
        m.insert("mode".to_string(), self.mode.name().to_string());
        m.insert("n_classes".into(), c.n_classes.to_string());
        m.insert("ae.in_bins".into(), c.ae.in_bins.to_string());
        m.insert("ae.channels".into(), list(&c.ae.channels));
        m.insert("ae.fc1".into(), c.ae.fc1.to_string());
        m.insert("ae.fc2".into(), c.ae.fc2.to_string());
        m.insert("ae.dropout".into(), c.ae.dropout.to_string());
        m.insert("ae.residual_shortcut".into(), c.ae.residual_shortcut.to_string());
        m.insert("ae.input_concat".into(), c.ae.input_concat.to_string());
        m.insert("ve.channels".into(), list(&c.ve.channels));
        m.insert("ve.image_size".into(), c.ve.image_size.to_string());
        m.insert("sc.hidden".into(), c.sc.hidden.to_string());
        m.insert("sc.dropout".into(), c.sc.dropout.to_string());
        for (k, v) in &self.extra {
            m.insert(format!("extra.{k}"), v.clone());
        }
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.params, &self.metadata())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, &self.metadata(), path)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, store) = checkpoint::decode::<T>(bytes)?;
        Self::from_parts(&meta, &store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load::<T>(path)?;
        Self::from_parts(&meta, &store).map_err(|e| match e {
            Error::Format { offset, message } => Error::format(offset, format!("{}: {message}", path.display())),
            other => other,
        })
    }

    fn from_parts(meta: &str, store: &ParamStore<T>) -> Result<Self> {
        let bad = |m: String| Error::format(0, format!("checkpoint metadata: {m}"));
        let mut map = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| bad(format!("missing key {k}")));
        fn num<V: std::str::FromStr>(k: &str, v: String) -> Result<V> {
            v.parse().map_err(|_| Error::format(0, format!("checkpoint metadata: bad value {v:?} for {k}")))
        }
        let list = |k: &str| -> Result<Vec<usize>> { get(k)?.split(',').map(|s| num(k, s.to_string())).collect() };
        let cfg = ModelConfig {
            n_classes: num("n_classes", get("n_classes")?)?,
            ae: AcousticEncoderCfg {
                in_bins: num("ae.in_bins", get("ae.in_bins")?)?,
                channels: list("ae.channels")?,
                fc1: num("ae.fc1", get("ae.fc1")?)?,
                fc2: num("ae.fc2", get("ae.fc2")?)?,
                dropout: num("ae.dropout", get("ae.dropout")?)?,
                residual_shortcut: num("ae.residual_shortcut", get("ae.residual_shortcut")?)?,
                input_concat: num("ae.input_concat", get("ae.input_concat")?)?,
            },
            ve: VisualEncoderCfg {
                channels: list("ve.channels")?,
                image_size: num("ve.image_size", get("ve.image_size")?)?,
            },
            sc: SceneClassifierCfg {
                hidden: num("sc.hidden", get("sc.hidden")?)?,
                dropout: num("sc.dropout", get("sc.dropout")?)?,
            },
        };
        let mode = Mode::parse(&get("mode")?).map_err(|e| bad(e.to_string()))?;
        let mut model = build_model::<T>(mode, &cfg, 0).map_err(|e| bad(e.to_string()))?;
        model.params.assign_from(store).map_err(|e| bad(e.to_string()))?;
        model.extra = map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(model)
    }
}

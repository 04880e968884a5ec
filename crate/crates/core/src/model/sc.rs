//! Scene classifier: `Linear -> BN -> ReLU -> Dropout -> Linear` to logits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, BnCache, Dropout, DropoutCache, InputCache, Linear, Relu, ReluCache};
use crate::nn::ops;
use crate::nn::{Group, ParamStore, Phase, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneClassifierCfg {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for SceneClassifierCfg {
    fn default() -> Self {
        Self {
            hidden: 1024,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneClassifier {
    fc1: Linear,
    bn: BatchNorm,
    drop: Dropout,
    fc2: Linear,
    in_width: usize,
    n_classes: usize,
}

pub struct ScCache<T> {
    fc1: InputCache<T>,
    bn: BnCache<T>,
    relu: ReluCache<T>,
    drop: DropoutCache<T>,
    fc2: InputCache<T>,
}

impl SceneClassifier {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        group: Group,
        in_width: usize,
        cfg: &SceneClassifierCfg,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_width == 0 || cfg.hidden == 0 || n_classes < 2 {
            return Err(Error::config(format!(
                "scene classifier needs positive widths and >= 2 classes (in {in_width}, hidden {}, classes {n_classes})",
                cfg.hidden
            )));
        }
        ops::check_dropout_p(cfg.dropout)?;
        Ok(Self {
            fc1: Linear::new(ps, &format!("{prefix}.fc1"), group, in_width, cfg.hidden, rng),
            bn: BatchNorm::new(ps, &format!("{prefix}.fc1.bn"), group, cfg.hidden),
            drop: Dropout::new(cfg.dropout)?,
            fc2: Linear::new(ps, &format!("{prefix}.fc2"), group, cfg.hidden, n_classes, rng),
            in_width,
            n_classes,
        })
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, e: &Tensor<T>, phase: &mut Phase<'_>) -> Result<(Tensor<T>, ScCache<T>)> {
        if e.rank() != 2 || e.dims()[1] != self.in_width {
            return Err(Error::input(format!(
                "scene classifier expects N x {}, got {:?}",
                self.in_width,
                e.dims()
            )));
        }
        let (z, fc1) = self.fc1.forward(ps, e, phase)?;
        let (z, bn) = self.bn.forward(ps, &z, phase)?;
        let (z, relu) = Relu.forward(&z, phase);
        let (z, drop) = self.drop.forward(&z, phase)?;
        let (z, fc2) = self.fc2.forward(ps, &z, phase)?;
        Ok((z, ScCache { fc1, bn, relu, drop, fc2 }))
    }

    pub fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &ScCache<T>, dlogits: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let g = self.fc2.backward(ps, &cache.fc2, dlogits, true)?.expect("dx requested");
        let g = self.drop.backward(&cache.drop, &g)?;
        let g = Relu.backward(&cache.relu, &g)?;
        let g = self.bn.backward(ps, &cache.bn, &g)?;
        self.fc1.backward(ps, &cache.fc1, &g, need_dx)
    }

    pub fn commit<T: Real>(&self, ps: &mut ParamStore<T>, cache: &ScCache<T>) {
        self.bn.commit(ps, &cache.bn);
    }

    /// Zero every weight and bias of the classifier.
    pub fn zero<T: Real>(&self, ps: &mut ParamStore<T>) {
        for id in [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias] {
            ps.value_mut(id).fill(T::zero());
        }
    }
}

//! Layers binding the kernels in [`crate::nn::ops`] to named entries of a
//! [`ParamStore`]. Forward passes never mutate the store; batch-norm running
//! statistics are written back explicitly through `commit`.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{self, BnOutput};
use crate::nn::params::{Group, ParamId, ParamStore};
use crate::nn::tensor::{Real, Tensor};

/// Execution phase of a forward pass.
pub enum Phase<'a> {
    /// Batch statistics, live dropout, caches kept for backward.
    Train(&'a mut ChaCha8Rng),
    /// Running statistics, no dropout, caches kept (used by gradient checks).
    Eval,
    /// Running statistics, no dropout, no caches.
    Infer,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }

    pub fn keeps_cache(&self) -> bool {
        !matches!(self, Phase::Infer)
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Phase::Train(rng) => Some(&mut **rng),
            _ => None,
        }
    }
}

fn missing(what: &str) -> Error {
    Error::state(format!("{what}: backward called without a forward cache"))
}

fn kaiming_uniform<T: Real>(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| T::lit(rng.random_range(-bound..bound)))
}

fn keep<T: Clone>(phase: &Phase<'_>, t: &T) -> Option<T> {
    phase.keeps_cache().then(|| t.clone())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct InputCache<T>(Option<Tensor<T>>);

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            group,
            kaiming_uniform(&[cout, cin, kernel], cin * kernel, rng),
        );
        let bias = ps.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            pad,
            stride,
        }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        phase: &Phase<'_>,
    ) -> Result<(Tensor<T>, InputCache<T>)> {
        let y = ops::conv1d(x, ps.value(self.weight), ps.value(self.bias), self.pad, self.stride)?;
        Ok((y, InputCache(keep(phase, x))))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &InputCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let x = cache.0.as_ref().ok_or_else(|| missing("conv1d"))?;
        let (dx, dw, db) = ops::conv1d_backward(x, ps.value(self.weight), self.pad, self.stride, dy)?;
        ps.accumulate(self.weight, dw.data())?;
        ps.accumulate(self.bias, db.data())?;
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            group,
            kaiming_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
        );
        let bias = ps.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            pad,
            stride,
        }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        phase: &Phase<'_>,
    ) -> Result<(Tensor<T>, InputCache<T>)> {
        let y = ops::conv2d(x, ps.value(self.weight), ps.value(self.bias), self.pad, self.stride)?;
        Ok((y, InputCache(keep(phase, x))))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &InputCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let x = cache.0.as_ref().ok_or_else(|| missing("conv2d"))?;
        let (dx, dw, db) = ops::conv2d_backward(x, ps.value(self.weight), self.pad, self.stride, dy)?;
        ps.accumulate(self.weight, dw.data())?;
        ps.accumulate(self.bias, db.data())?;
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: Group,
        fin: usize,
        fout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            group,
            kaiming_uniform(&[fout, fin], fin, rng),
        );
        let bias = ps.add(format!("{name}.bias"), group, Tensor::zeros(&[fout]));
        Self { weight, bias }
    }

    pub fn in_features<T: Real>(&self, ps: &ParamStore<T>) -> usize {
        ps.value(self.weight).dims()[1]
    }

    pub fn out_features<T: Real>(&self, ps: &ParamStore<T>) -> usize {
        ps.value(self.weight).dims()[0]
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        phase: &Phase<'_>,
    ) -> Result<(Tensor<T>, InputCache<T>)> {
        let y = ops::linear(x, ps.value(self.weight), ps.value(self.bias))?;
        Ok((y, InputCache(keep(phase, x))))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &InputCache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let x = cache.0.as_ref().ok_or_else(|| missing("linear"))?;
        let (dx, dw, db) = ops::linear_backward(x, ps.value(self.weight), dy, need_dx)?;
        ps.accumulate(self.weight, dw.data())?;
        ps.accumulate(self.bias, db.data())?;
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------

/// Batch normalization over the channel axis (axis 1) of any `N x C x ...`
/// input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T>(Option<BnOutput<T>>);

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, group: Group, channels: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), group, Tensor::full(&[channels], T::one())),
            beta: ps.add(format!("{name}.beta"), group, Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), group, Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(
                format!("{name}.running_var"),
                group,
                Tensor::full(&[channels], T::one()),
            ),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        phase: &Phase<'_>,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        let gamma = ps.value(self.gamma).data();
        let beta = ps.value(self.beta).data();
        let eps = T::lit(self.eps);
        let mut out = if phase.is_train() {
            ops::batchnorm_train(x, gamma, beta, eps)?
        } else {
            ops::batchnorm_eval(
                x,
                gamma,
                beta,
                ps.value(self.running_mean).data(),
                ps.value(self.running_var).data(),
                eps,
            )?
        };
        let y = std::mem::replace(&mut out.y, Tensor::zeros(&[0]));
        let cache = if phase.keeps_cache() { Some(out) } else { None };
        Ok((y, BnCache(cache)))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let out = cache.0.as_ref().ok_or_else(|| missing("batchnorm"))?;
        let (dx, dg, db) = ops::batchnorm_backward(out, ps.value(self.gamma).data(), dy)?;
        ps.accumulate(self.gamma, &dg)?;
        ps.accumulate(self.beta, &db)?;
        Ok(dx)
    }

    /// Fold the batch statistics of a training-mode pass into the running
    /// estimates. Frozen layers keep their statistics.
    pub fn commit<T: Real>(&self, ps: &mut ParamStore<T>, cache: &BnCache<T>) {
        let Some(stats) = cache.0.as_ref().and_then(|o| o.stats.as_ref()) else {
            return;
        };
        if ps.get(self.gamma).frozen {
            return;
        }
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let unbias = if stats.count > 1 {
            T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in ps.value_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in ps.value_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct Relu;

#[derive(Debug, Clone)]
pub struct ReluCache<T>(Option<Tensor<T>>);

enum MaskTape {
    Record(Vec<Vec<bool>>),
    Replay(Vec<Vec<bool>>, usize),
}

thread_local! {
    static MASK_TAPE: RefCell<Option<MaskTape>> = const { RefCell::new(None) };
}

/// ReLU activation patterns in call order, captured by [`record_relu_masks`].
#[derive(Debug, Clone, Default)]
pub struct ReluMasks(Vec<Vec<bool>>);

/// Runs `f` and captures the mask of every ReLU it evaluates on this thread.
pub fn record_relu_masks<R>(f: impl FnOnce() -> R) -> (R, ReluMasks) {
    MASK_TAPE.with(|t| *t.borrow_mut() = Some(MaskTape::Record(Vec::new())));
    let out = f();
    let masks = match MASK_TAPE.with(|t| t.borrow_mut().take()) {
        Some(MaskTape::Record(m)) => m,
        _ => Vec::new(),
    };
    (out, ReluMasks(masks))
}

/// Runs `f` with every ReLU gated by the recorded masks instead of its input
/// sign.
pub fn replay_relu_masks<R>(masks: &ReluMasks, f: impl FnOnce() -> R) -> R {
    MASK_TAPE.with(|t| *t.borrow_mut() = Some(MaskTape::Replay(masks.0.clone(), 0)));
    let out = f();
    MASK_TAPE.with(|t| *t.borrow_mut() = None);
    out
}

fn taped_relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    MASK_TAPE.with(|t| match t.borrow_mut().as_mut() {
        None => ops::relu(x),
        Some(MaskTape::Record(m)) => {
            m.push(x.data().iter().map(|&v| v > T::zero()).collect());
            ops::relu(x)
        }
        Some(MaskTape::Replay(m, next)) => {
            let mask = m.get(*next).filter(|k| k.len() == x.len());
            *next += 1;
            match mask {
                Some(k) => {
                    let data = x.data().iter().zip(k).map(|(&v, &on)| if on { v } else { T::zero() }).collect();
                    Tensor::from_vec(x.dims(), data).expect("same shape")
                }
                None => ops::relu(x),
            }
        }
    })
}

impl Relu {
    pub fn forward<T: Real>(&self, x: &Tensor<T>, phase: &Phase<'_>) -> (Tensor<T>, ReluCache<T>) {
        let y = taped_relu(x);
        let cache = keep(phase, &y);
        (y, ReluCache(cache))
    }

    pub fn backward<T: Real>(&self, cache: &ReluCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = cache.0.as_ref().ok_or_else(|| missing("relu"))?;
        ops::relu_backward(y, dy)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct DropoutCache<T> {
    mask: Option<Vec<T>>,
    kept: bool,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        ops::check_dropout_p(p)?;
        Ok(Self { p })
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>, phase: &mut Phase<'_>) -> Result<(Tensor<T>, DropoutCache<T>)> {
        let kept = phase.keeps_cache();
        let (y, mask) = ops::dropout(x, self.p, phase.rng())?;
        Ok((y, DropoutCache { mask, kept }))
    }

    pub fn backward<T: Real>(&self, cache: &DropoutCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if !cache.kept {
            return Err(missing("dropout"));
        }
        ops::dropout_backward(cache.mask.as_deref(), dy)
    }
}

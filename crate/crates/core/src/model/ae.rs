//! Acoustic encoder: a 4-block res-DCNN over `2 x B` feature frames.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, BnCache, Conv1d, Dropout, DropoutCache, InputCache, Linear, Relu, ReluCache};
use crate::nn::ops::{self, window_out_len};
use crate::nn::{Group, ParamStore, Phase, Real, Tensor};

pub const CONV_KERNEL: usize = 3;
pub const POOL: (usize, usize, usize) = (3, 1, 2);

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticEncoderCfg {
    pub in_bins: usize,
    /// Channel plan; block `i` maps `channels[i] -> channels[i + 1]`.
    pub channels: Vec<usize>,
    pub fc1: usize,
    pub fc2: usize,
    pub dropout: f64,
    pub residual_shortcut: bool,
    pub input_concat: bool,
}

impl Default for AcousticEncoderCfg {
    fn default() -> Self {
        Self {
            in_bins: 290,
            channels: vec![2, 4, 8, 16, 32],
            fc1: 2048,
            fc2: 1024,
            dropout: 0.5,
            residual_shortcut: true,
            input_concat: true,
        }
    }
}

impl AcousticEncoderCfg {
    pub fn with_bins(in_bins: usize) -> Self {
        Self {
            in_bins,
            ..Self::default()
        }
    }

    /// Length after each block, or `None` when the input is too short.
    pub fn block_lengths(&self) -> Option<Vec<usize>> {
        let mut len = self.in_bins;
        let mut out = Vec::new();
        for _ in 1..self.channels.len() {
            let conv = window_out_len(len, CONV_KERNEL, 0, 1)?;
            len = window_out_len(conv, POOL.0, POOL.1, POOL.2)?;
            out.push(len);
        }
        Some(out)
    }

    pub fn conv_out_width(&self) -> Option<usize> {
        let lens = self.block_lengths()?;
        Some(self.channels.last()? * lens.last()?)
    }

    /// Width entering fc1.
    pub fn concat_width(&self) -> Option<usize> {
        let conv = self.conv_out_width()?;
        Some(conv + if self.input_concat { self.channels[0] * self.in_bins } else { 0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("acoustic encoder needs at least one block with non-zero channels"));
        }
        if self.channels[0] != 2 {
            return Err(Error::config("acoustic encoder input has 2 channels (average, difference)"));
        }
        if self.fc1 == 0 || self.fc2 == 0 {
            return Err(Error::config("acoustic encoder fc widths must be positive"));
        }
        ops::check_dropout_p(self.dropout)?;
        match self.block_lengths() {
            Some(l) if l.last().is_some_and(|&x| x > 0) => Ok(()),
            _ => Err(Error::config(format!(
                "{} bins are too few for {} conv blocks",
                self.in_bins,
                self.channels.len() - 1
            ))),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv1d,
    bn: BatchNorm,
    shortcut: Option<Conv1d>,
}

#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    pub cfg: AcousticEncoderCfg,
    blocks: Vec<Block>,
    fc1: Linear,
    bn1: BatchNorm,
    drop: Dropout,
    fc2: Linear,
    bn2: BatchNorm,
}

struct BlockCache<T> {
    conv: InputCache<T>,
    bn: BnCache<T>,
    relu: ReluCache<T>,
    conv_dims: Vec<usize>,
    shortcut: Option<InputCache<T>>,
}

pub struct AeCache<T> {
    in_dims: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    conv_out_dims: Vec<usize>,
    fc1: InputCache<T>,
    bn1: BnCache<T>,
    r1: ReluCache<T>,
    d1: DropoutCache<T>,
    fc2: InputCache<T>,
    bn2: BnCache<T>,
    r2: ReluCache<T>,
}

fn pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ops::avgpool1d(x, POOL.0, POOL.1, POOL.2)
}

fn pool_back<T: Real>(in_dims: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    ops::avgpool1d_backward(in_dims, POOL.0, POOL.1, POOL.2, dy)
}

impl AcousticEncoder {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, cfg: &AcousticEncoderCfg, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let g = Group::Ae;
        let blocks = cfg
            .channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| Block {
                conv: Conv1d::new(ps, &format!("ae.block{i}.conv"), g, w[0], w[1], CONV_KERNEL, 0, 1, rng),
                bn: BatchNorm::new(ps, &format!("ae.block{i}.bn"), g, w[1]),
                shortcut: cfg
                    .residual_shortcut
                    .then(|| Conv1d::new(ps, &format!("ae.block{i}.shortcut"), g, w[0], w[1], CONV_KERNEL, 0, 1, rng)),
            })
            .collect();
        let concat = cfg.concat_width().expect("validated");
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            fc1: Linear::new(ps, "ae.fc1", g, concat, cfg.fc1, rng),
            bn1: BatchNorm::new(ps, "ae.fc1.bn", g, cfg.fc1),
            drop: Dropout::new(cfg.dropout)?,
            fc2: Linear::new(ps, "ae.fc2", g, cfg.fc1, cfg.fc2, rng),
            bn2: BatchNorm::new(ps, "ae.fc2.bn", g, cfg.fc2),
        })
    }

    pub fn out_width(&self) -> usize {
        self.cfg.fc2
    }

    /// `x: N x 2 x B` to `N x fc2`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>, phase: &mut Phase<'_>) -> Result<(Tensor<T>, AeCache<T>)> {
        let expect = [x.dims().first().copied().unwrap_or(0), self.cfg.channels[0], self.cfg.in_bins];
        if x.dims() != expect {
            return Err(Error::input(format!("acoustic encoder expects N x {} x {}, got {:?}", expect[1], expect[2], x.dims())));
        }
        let n = expect[0];
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (c, conv) = b.conv.forward(ps, &h, phase)?;
            let conv_dims = c.dims().to_vec();
            let (c, bn) = b.bn.forward(ps, &c, phase)?;
            let (c, relu) = Relu.forward(&c, phase);
            let mut out = pool(&c)?;
            let shortcut = match &b.shortcut {
                Some(s) => {
                    let (sc, cache) = s.forward(ps, &h, phase)?;
                    out.add_assign(&pool(&sc)?)?;
                    Some(cache)
                }
                None => None,
            };
            caches.push(BlockCache {
                conv,
                bn,
                relu,
                conv_dims,
                shortcut,
            });
            h = out;
        }
        let conv_out_dims = h.dims().to_vec();
        let flat = h.reshape(&[n, conv_out_dims[1] * conv_out_dims[2]])?;
        let z = if self.cfg.input_concat {
            let raw = x.clone().reshape(&[n, expect[1] * expect[2]])?;
            Tensor::concat_cols(&[&flat, &raw])?
        } else {
            flat
        };
        let (z, fc1) = self.fc1.forward(ps, &z, phase)?;
        let (z, bn1) = self.bn1.forward(ps, &z, phase)?;
        let (z, r1) = Relu.forward(&z, phase);
        let (z, d1) = self.drop.forward(&z, phase)?;
        let (z, fc2) = self.fc2.forward(ps, &z, phase)?;
        let (z, bn2) = self.bn2.forward(ps, &z, phase)?;
        let (z, r2) = Relu.forward(&z, phase);
        Ok((
            z,
            AeCache {
                in_dims: x.dims().to_vec(),
                blocks: caches,
                conv_out_dims,
                fc1,
                bn1,
                r1,
                d1,
                fc2,
                bn2,
                r2,
            },
        ))
    }

    /// Accumulates parameter gradients. Returns the input gradient when
    /// `need_dx` is set.
    pub fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &AeCache<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let g = Relu.backward(&cache.r2, dy)?;
        let g = self.bn2.backward(ps, &cache.bn2, &g)?;
        let g = self.fc2.backward(ps, &cache.fc2, &g, true)?.expect("dx requested");
        let g = self.drop.backward(&cache.d1, &g)?;
        let g = Relu.backward(&cache.r1, &g)?;
        let g = self.bn1.backward(ps, &cache.bn1, &g)?;
        let dz = self.fc1.backward(ps, &cache.fc1, &g, true)?.expect("dx requested");
        let conv_w = cache.conv_out_dims[1] * cache.conv_out_dims[2];
        let mut dh = dz.slice_cols(0, conv_w)?.reshape(&cache.conv_out_dims)?;
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dpool = pool_back(&c.conv_dims, &dh)?;
            let g = Relu.backward(&c.relu, &dpool)?;
            let g = b.bn.backward(ps, &c.bn, &g)?;
            let mut dx = b.conv.backward(ps, &c.conv, &g)?;
            if let (Some(s), Some(sc)) = (&b.shortcut, &c.shortcut) {
                dx.add_assign(&s.backward(ps, sc, &dpool)?)?;
            }
            dh = dx;
        }
        if !need_dx {
            return Ok(None);
        }
        if self.cfg.input_concat {
            let raw = dz.slice_cols(conv_w, dz.dims()[1])?.reshape(&cache.in_dims)?;
            dh.add_assign(&raw)?;
        }
        Ok(Some(dh))
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn commit<T: Real>(&self, ps: &mut ParamStore<T>, cache: &AeCache<T>) {
        for (b, c) in self.blocks.iter().zip(&cache.blocks) {
            b.bn.commit(ps, &c.bn);
        }
        self.bn1.commit(ps, &cache.bn1);
        self.bn2.commit(ps, &cache.bn2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometry() {
        let c = AcousticEncoderCfg::with_bins(290);
        assert_eq!(c.block_lengths().unwrap(), [144, 71, 35, 17]);
        assert_eq!(c.concat_width(), Some(1124));
        let c = AcousticEncoderCfg::with_bins(256);
        assert_eq!(c.block_lengths().unwrap(), [127, 63, 31, 15]);
        assert_eq!(c.concat_width(), Some(992));
        assert_eq!(AcousticEncoderCfg::with_bins(64).block_lengths().unwrap()[3], 3);
        assert!(matches!(AcousticEncoderCfg::with_bins(20).validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn output_width_and_shortcut_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(&[2, 2, 64], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let small = |shortcut| AcousticEncoderCfg {
            in_bins: 64,
            fc1: 16,
            fc2: 8,
            residual_shortcut: shortcut,
            ..AcousticEncoderCfg::default()
        };
        let mut ps = ParamStore::new();
        let ae = AcousticEncoder::new(&mut ps, &small(true), &mut rng).unwrap();
        let (y, _) = ae.forward(&ps, &x, &mut Phase::Infer).unwrap();
        assert_eq!(y.dims(), [2, 8]);

        let mut ps2 = ParamStore::new();
        let plain = AcousticEncoder::new(&mut ps2, &small(false), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for p in ps2.entries_mut() {
            let id = ps.find(&p.name).unwrap();
            p.value = ps.value(id).clone();
        }
        let (y2, _) = plain.forward(&ps2, &x, &mut Phase::Infer).unwrap();
        assert_ne!(y.data(), y2.data());
    }

    #[test]
    fn wrong_input_shape() {
        let mut ps = ParamStore::<f32>::new();
        let ae = AcousticEncoder::new(&mut ps, &AcousticEncoderCfg::with_bins(64), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros(&[1, 2, 65]);
        assert!(matches!(ae.forward(&ps, &x, &mut Phase::Infer), Err(Error::InvalidInput(_))));
    }
}

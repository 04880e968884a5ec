//! Visual encoder: a small CNN kept frozen inside audio-visual models.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, BnCache, Conv2d, InputCache, Relu, ReluCache};
use crate::nn::ops;
use crate::nn::{Group, ParamStore, Phase, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoderCfg {
    /// Block `i` maps `channels[i] -> channels[i + 1]` with a stride-2 conv.
    pub channels: Vec<usize>,
    pub image_size: usize,
}

impl Default for VisualEncoderCfg {
    fn default() -> Self {
        Self {
            channels: vec![3, 16, 32, 64, 128],
            image_size: 64,
        }
    }
}

impl VisualEncoderCfg {
    pub fn embed_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels[0] != 3 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("visual encoder needs 3 input channels and at least one block"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub cfg: VisualEncoderCfg,
    blocks: Vec<Block>,
}

pub struct VeCache<T> {
    blocks: Vec<(InputCache<T>, BnCache<T>, ReluCache<T>)>,
    pooled_dims: Vec<usize>,
}

impl VisualEncoder {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, cfg: &VisualEncoderCfg, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = cfg
            .channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| Block {
                conv: Conv2d::new(ps, &format!("ve.block{i}.conv"), Group::Ve, w[0], w[1], 3, 1, 2, rng),
                bn: BatchNorm::new(ps, &format!("ve.block{i}.bn"), Group::Ve, w[1]),
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    pub fn out_width(&self) -> usize {
        self.cfg.embed_dim()
    }

    /// `x: N x 3 x S x S` to `N x D_v`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>, phase: &Phase<'_>) -> Result<(Tensor<T>, VeCache<T>)> {
        let s = self.cfg.image_size;
        let n = x.dims().first().copied().unwrap_or(0);
        if x.dims() != [n, 3, s, s] {
            return Err(Error::input(format!("visual encoder expects N x 3 x {s} x {s}, got {:?}", x.dims())));
        }
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (c, conv) = b.conv.forward(ps, &h, phase)?;
            let (c, bn) = b.bn.forward(ps, &c, phase)?;
            let (c, relu) = Relu.forward(&c, phase);
            blocks.push((conv, bn, relu));
            h = c;
        }
        let pooled_dims = h.dims().to_vec();
        Ok((ops::global_avgpool2d(&h)?, VeCache { blocks, pooled_dims }))
    }

    /// Parameter gradients only; used when pre-training the encoder.
    pub fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &VeCache<T>, dy: &Tensor<T>) -> Result<()> {
        let mut g = ops::global_avgpool2d_backward(&cache.pooled_dims, dy)?;
        for (b, (conv, bn, relu)) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d = Relu.backward(relu, &g)?;
            let d = b.bn.backward(ps, bn, &d)?;
            g = b.conv.backward(ps, conv, &d)?;
        }
        Ok(())
    }

    pub fn commit<T: Real>(&self, ps: &mut ParamStore<T>, cache: &VeCache<T>) {
        for (b, (_, bn, _)) in self.blocks.iter().zip(&cache.blocks) {
            b.bn.commit(ps, bn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_embedding_width_and_determinism() {
        let mut ps = ParamStore::<f32>::new();
        let ve = VisualEncoder::new(&mut ps, &VisualEncoderCfg::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i * 13) % 255) as f32 / 255.0);
        let (a, _) = ve.forward(&ps, &x, &Phase::Infer).unwrap();
        let (b, _) = ve.forward(&ps, &x, &Phase::Infer).unwrap();
        assert_eq!(a.dims(), [2, 128]);
        assert_eq!(a, b);
        let bad = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(matches!(ve.forward(&ps, &bad, &Phase::Infer), Err(Error::InvalidInput(_))));
    }
}

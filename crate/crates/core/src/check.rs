//! Gradient-check suite over every layer type and the composed
//! acoustic encoder, fusion and scene classifier, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{build_model, AcousticEncoderCfg, Encoded, Mode, ModelConfig, ModelInput, SceneClassifierCfg, VisualEncoderCfg};
use crate::nn::gradcheck::{grad_check, grad_check_store, sample_coords};
use crate::nn::layers::{record_relu_masks, replay_relu_masks, BatchNorm, Conv1d, Conv2d, Dropout, Linear, Relu};
use crate::nn::{ops, Group, ParamStore, Phase, Tensor};

/// Maximum relative error accepted by [`run_grad_check`].
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor and per input.
    pub max_coords: usize,
    pub seed: u64,
    /// Shift the conv1d weight gradient by one element before checking.
    pub sabotage: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 24,
            seed: 0,
            sabotage: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub layer: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Forward and backward of one layer under the projection loss `sum(r * y)`.
struct LayerCase<'a> {
    name: &'a str,
    ps: ParamStore<f64>,
    x: Tensor<f64>,
    forward: Box<dyn Fn(&ParamStore<f64>, &Tensor<f64>) -> Result<Tensor<f64>> + 'a>,
    /// Accumulates parameter gradients into the store and returns `dx`.
    backward: Box<dyn Fn(&mut ParamStore<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>> + 'a>,
}

fn run_case(case: LayerCase<'_>, opts: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let LayerCase {
        name,
        mut ps,
        x,
        forward,
        backward,
    } = case;
    let y = forward(&ps, &x)?;
    let r = rand_tensor(y.dims(), rng);
    ps.zero_grad();
    let dx = backward(&mut ps, &x, &r)?;
    if opts.sabotage && name == "conv1d" {
        let pos = ps
            .entries()
            .iter()
            .position(|p| p.name == "conv1d.weight")
            .ok_or_else(|| Error::state("conv1d weight missing"))?;
        ps.entries_mut()[pos].grad.data_mut().rotate_right(1);
    }
    let mut worst = 0.0f64;
    let mut coords = 0;
    let seed = opts.seed ^ name.len() as u64;
    let report = grad_check_store(&mut ps, |p| Ok(dot(&forward(p, &x)?, &r)), opts.eps, opts.max_coords, seed)?;
    for c in &report {
        worst = worst.max(c.rel_error);
        coords += c.coords;
    }
    let xc = sample_coords(x.len(), opts.max_coords, seed.wrapping_add(1));
    let err = grad_check(
        |v| {
            let xt = Tensor::from_vec(x.dims(), v.to_vec()).expect("same shape");
            forward(&ps, &xt).map(|y| dot(&y, &r)).unwrap_or(f64::NAN)
        },
        x.data(),
        dx.data(),
        opts.eps,
        &xc,
    );
    Ok(CheckLine {
        layer: name.to_string(),
        max_rel_error: if err.is_nan() { f64::INFINITY } else { worst.max(err) },
        coords: coords + xc.len(),
    })
}

fn randomize_running_stats(ps: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in ps.entries_mut() {
        if p.name.ends_with(".running_mean") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        } else if p.name.ends_with(".running_var") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        } else if p.name.ends_with(".gamma") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if p.name.ends_with(".beta") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

fn layer_cases<'a>(rng: &mut ChaCha8Rng) -> Vec<LayerCase<'a>> {
    let mut cases = Vec::new();

    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "linear", Group::Sc, 7, 5, rng);
    let l2 = lin.clone();
    cases.push(LayerCase {
        name: "linear",
        ps,
        x: rand_tensor(&[8, 7], rng),
        forward: Box::new(move |ps, x| Ok(lin.forward(ps, x, &Phase::Eval)?.0)),
        backward: Box::new(move |ps, x, dy| {
            let (_, c) = l2.forward(ps, x, &Phase::Eval)?;
            Ok(l2.backward(ps, &c, dy, true)?.expect("dx requested"))
        }),
    });

    let mut ps = ParamStore::new();
    let conv = Conv1d::new(&mut ps, "conv1d", Group::Ae, 3, 4, 3, 1, 2, rng);
    let c2 = conv.clone();
    cases.push(LayerCase {
        name: "conv1d",
        ps,
        x: rand_tensor(&[4, 3, 17], rng),
        forward: Box::new(move |ps, x| Ok(conv.forward(ps, x, &Phase::Eval)?.0)),
        backward: Box::new(move |ps, x, dy| {
            let (_, c) = c2.forward(ps, x, &Phase::Eval)?;
            c2.backward(ps, &c, dy)
        }),
    });

    let mut ps = ParamStore::new();
    let conv = Conv2d::new(&mut ps, "conv2d", Group::Ve, 3, 4, 3, 1, 2, rng);
    let c2 = conv.clone();
    cases.push(LayerCase {
        name: "conv2d",
        ps,
        x: rand_tensor(&[2, 3, 9, 9], rng),
        forward: Box::new(move |ps, x| Ok(conv.forward(ps, x, &Phase::Eval)?.0)),
        backward: Box::new(move |ps, x, dy| {
            let (_, c) = c2.forward(ps, x, &Phase::Eval)?;
            c2.backward(ps, &c, dy)
        }),
    });

    for train in [true, false] {
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", Group::Ae, 4);
        randomize_running_stats(&mut ps, rng);
        let b2 = bn.clone();
        let run = move |bn: &BatchNorm, ps: &ParamStore<f64>, x: &Tensor<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let phase = if train { Phase::Train(&mut r) } else { Phase::Eval };
            bn.forward(ps, x, &phase)
        };
        cases.push(LayerCase {
            name: if train { "batchnorm_train" } else { "batchnorm_eval" },
            ps,
            x: rand_tensor(&[6, 4, 5], rng),
            forward: Box::new(move |ps, x| Ok(run(&bn, ps, x)?.0)),
            backward: Box::new(move |ps, x, dy| {
                let (_, c) = run(&b2, ps, x)?;
                b2.backward(ps, &c, dy)
            }),
        });
    }

    cases.push(LayerCase {
        name: "relu",
        ps: ParamStore::new(),
        x: rand_tensor(&[5, 9], rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }),
        forward: Box::new(|_, x| Ok(Relu.forward(x, &Phase::Eval).0)),
        backward: Box::new(|_, x, dy| {
            let (_, c) = Relu.forward(x, &Phase::Eval);
            Relu.backward(&c, dy)
        }),
    });

    let drop_seed = rng.random::<u64>();
    let drop = Dropout::new(0.5).expect("valid probability");
    let d2 = drop.clone();
    cases.push(LayerCase {
        name: "dropout",
        ps: ParamStore::new(),
        x: rand_tensor(&[6, 8], rng),
        forward: Box::new(move |_, x| {
            let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
            Ok(drop.forward(x, &mut Phase::Train(&mut r))?.0)
        }),
        backward: Box::new(move |_, x, dy| {
            let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
            let (_, c) = d2.forward(x, &mut Phase::Train(&mut r))?;
            d2.backward(&c, dy)
        }),
    });

    cases.push(LayerCase {
        name: "avgpool1d",
        ps: ParamStore::new(),
        x: rand_tensor(&[3, 2, 11], rng),
        forward: Box::new(|_, x| ops::avgpool1d(x, 3, 1, 2)),
        backward: Box::new(|_, x, dy| ops::avgpool1d_backward(x.dims(), 3, 1, 2, dy)),
    });

    cases.push(LayerCase {
        name: "global_avgpool2d",
        ps: ParamStore::new(),
        x: rand_tensor(&[2, 3, 4, 5], rng),
        forward: Box::new(|_, x| ops::global_avgpool2d(x)),
        backward: Box::new(|_, x, dy| ops::global_avgpool2d_backward(x.dims(), dy)),
    });

    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    let l2 = labels.clone();
    cases.push(LayerCase {
        name: "softmax_cross_entropy",
        ps: ParamStore::new(),
        x: rand_tensor(&[6, 4], rng).map(|v| 3.0 * v),
        forward: Box::new(move |_, x| Ok(Tensor::full(&[1], ops::softmax_cross_entropy(x, &labels)?.0))),
        backward: Box::new(move |_, x, dy| {
            let (_, probs) = ops::softmax_cross_entropy(x, &l2)?;
            let mut g = ops::softmax_cross_entropy_backward(&probs, &l2)?;
            g.data_mut().iter_mut().for_each(|v| *v *= dy.data()[0]);
            Ok(g)
        }),
    });

    cases
}

/// Composed AE (with shortcuts and input concatenation) + fusion + SC at
/// batch 64, batch norm in evaluation mode with perturbed running
/// statistics and dropout off.
fn composed_case(opts: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let cfg = ModelConfig {
        ae: AcousticEncoderCfg {
            fc1: 24,
            fc2: 16,
            ..AcousticEncoderCfg::default()
        },
        ve: VisualEncoderCfg {
            channels: vec![3, 4, 4, 4, 6],
            image_size: 16,
        },
        sc: SceneClassifierCfg { hidden: 12, dropout: 0.5 },
        n_classes: 5,
    };
    let mut model = build_model::<f64>(Mode::AvJoint, &cfg, opts.seed)?;
    randomize_running_stats(&mut model.params, rng);
    let n = 64;
    let input = ModelInput {
        audio: Some(Encoded::Raw(rand_tensor(&[n, 2, cfg.ae.in_bins], rng))),
        visual: Some(Encoded::Embedded(rand_tensor(&[n, model.ve_width()], rng))),
    };
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
    let scale = n as f64;

    // numeric passes replay the base-point ReLU masks
    let (fwd, masks) = record_relu_masks(|| model.forward(&input, &mut Phase::Eval));
    let (logits, cache) = fwd?;
    let (_, probs) = ops::softmax_cross_entropy(&logits, &labels)?;
    let mut dlogits = ops::softmax_cross_entropy_backward(&probs, &labels)?;
    dlogits.data_mut().iter_mut().for_each(|v| *v *= scale);
    model.params.zero_grad();
    model.backward(&cache, &dlogits)?;

    let mut params = std::mem::take(&mut model.params);
    let report = grad_check_store(
        &mut params,
        |p| {
            let mut m = model.clone();
            m.params = p.clone();
            let (logits, _) = replay_relu_masks(&masks, || m.forward(&input, &mut Phase::Infer))?;
            Ok(scale * ops::softmax_cross_entropy(&logits, &labels)?.0)
        },
        opts.eps,
        opts.max_coords,
        opts.seed,
    )?;
    Ok(CheckLine {
        layer: "composed_ae_fuse_sc".into(),
        max_rel_error: report.iter().map(|c| c.rel_error).fold(0.0, f64::max),
        coords: report.iter().map(|c| c.coords).sum(),
    })
}

/// Check every layer type and the composed network. One line per check.
pub fn run_grad_check(opts: &CheckOptions) -> Result<Vec<CheckLine>> {
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(Error::config(format!("gradient-check step {} must be positive", opts.eps)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut lines = Vec::new();
    for case in layer_cases(&mut rng) {
        lines.push(run_case(case, opts, &mut rng)?);
    }
    lines.push(composed_case(opts, &mut rng)?);
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_layers_pass_and_sabotage_is_caught() {
        let lines = run_grad_check(&CheckOptions::default()).unwrap();
        for l in &lines {
            assert!(l.passed(), "{} {:e}", l.layer, l.max_rel_error);
        }
        let bad = run_grad_check(&CheckOptions { sabotage: true, ..Default::default() }).unwrap();
        let failed: Vec<_> = bad.iter().filter(|l| !l.passed()).map(|l| l.layer.as_str()).collect();
        assert_eq!(failed, ["conv1d"]);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        assert!(run_grad_check(&CheckOptions { eps: 0.0, ..Default::default() }).is_err());
    }
}

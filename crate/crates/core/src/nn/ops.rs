//! Forward and backward kernels for every layer type used by the encoders
//! and the classifier. All kernels are pure functions of their inputs; the
//! layer wrappers in [`crate::nn::layers`] bind them to a [`ParamStore`].
//!
//! [`ParamStore`]: crate::nn::ParamStore

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

/// Output length of a 1-D sliding window.
pub fn window_out_len(len: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

fn dims3(x: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [n, c, l] => Ok((n, c, l)),
        ref d => Err(Error::input(format!("{what} expects N x C x L input, got {d:?}"))),
    }
}

fn dims4(x: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref d => Err(Error::input(format!(
            "{what} expects N x C x H x W input, got {d:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

pub fn conv1d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, cin, len) = dims3(x, "conv1d")?;
    let (cout, wcin, k) = dims3(weight, "conv1d weight")?;
    if wcin != cin || bias.dims() != [cout] {
        return Err(Error::input(format!(
            "conv1d: input channels {cin}, weight {:?}, bias {:?}",
            weight.dims(),
            bias.dims()
        )));
    }
    let out_len = window_out_len(len, k, pad, stride).ok_or_else(|| {
        Error::input(format!("conv1d: length {len} with pad {pad} shorter than kernel {k}"))
    })?;
    let xs = x.data();
    let ws = weight.data();
    let mut out = Tensor::zeros(&[n, cout, out_len]);
    let od = out.data_mut();
    for s in 0..n {
        for co in 0..cout {
            let row = &mut od[(s * cout + co) * out_len..(s * cout + co + 1) * out_len];
            row.fill(bias.data()[co]);
            for ci in 0..cin {
                let xrow = &xs[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                for j in 0..k {
                    let w = ws[(co * cin + ci) * k + j];
                    for (t, o) in row.iter_mut().enumerate() {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            *o += w * xrow[pos as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d`]: `(dx, dweight, dbias)`.
pub fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin, len) = dims3(x, "conv1d")?;
    let (cout, _, k) = dims3(weight, "conv1d weight")?;
    let out_len = window_out_len(len, k, pad, stride)
        .ok_or_else(|| Error::input("conv1d backward: bad geometry"))?;
    dy.expect_dims(&[n, cout, out_len])?;
    let xs = x.data();
    let ws = weight.data();
    let gs = dy.data();
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(weight.dims());
    let mut db = Tensor::zeros(&[cout]);
    {
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        for s in 0..n {
            for co in 0..cout {
                let grow = &gs[(s * cout + co) * out_len..(s * cout + co + 1) * out_len];
                dbd[co] += grow.iter().copied().sum::<T>();
                for ci in 0..cin {
                    let base = (s * cin + ci) * len;
                    for j in 0..k {
                        let widx = (co * cin + ci) * k + j;
                        let w = ws[widx];
                        let mut acc = T::zero();
                        for (t, &g) in grow.iter().enumerate() {
                            let pos = (t * stride + j) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += g * xs[base + pos as usize];
                                dxd[base + pos as usize] += g * w;
                            }
                        }
                        dwd[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// conv2d (im2col + GEMM)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Geom2d {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: usize,
    stride: usize,
}

fn geom2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, pad: usize, stride: usize) -> Result<(usize, usize, Geom2d)> {
    let (n, cin, h, w) = dims4(x, "conv2d")?;
    let (cout, wcin, kh, kw) = dims4(weight, "conv2d weight")?;
    if wcin != cin {
        return Err(Error::input(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    let oh = window_out_len(h, kh, pad, stride)
        .ok_or_else(|| Error::input("conv2d: input height smaller than kernel"))?;
    let ow = window_out_len(w, kw, pad, stride)
        .ok_or_else(|| Error::input("conv2d: input width smaller than kernel"))?;
    Ok((
        n,
        cout,
        Geom2d {
            cin,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            pad,
            stride,
        },
    ))
}

fn im2col<T: Real>(img: &[T], g: &Geom2d, cols: &mut [T]) {
    let hw = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            img[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom2d, img: &mut [T]) {
    let hw = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            img[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = geom2d(x, weight, pad, stride)?;
    bias.expect_dims(&[cout])?;
    let patch = g.cin * g.kh * g.kw;
    let hw = g.oh * g.ow;
    let in_size = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); patch * hw];
    let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
    let od = out.data_mut();
    for s in 0..n {
        im2col(&x.data()[s * in_size..(s + 1) * in_size], &g, &mut cols);
        let o = &mut od[s * cout * hw..(s + 1) * cout * hw];
        for (co, chunk) in o.chunks_mut(hw).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        T::gemm(cout, patch, hw, T::one(), weight.data(), false, &cols, false, T::one(), o);
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cout, g) = geom2d(x, weight, pad, stride)?;
    dy.expect_dims(&[n, cout, g.oh, g.ow])?;
    let patch = g.cin * g.kh * g.kw;
    let hw = g.oh * g.ow;
    let in_size = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); patch * hw];
    let mut dcols = vec![T::zero(); patch * hw];
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(weight.dims());
    let mut db = Tensor::zeros(&[cout]);
    for s in 0..n {
        let g_s = &dy.data()[s * cout * hw..(s + 1) * cout * hw];
        for (co, chunk) in g_s.chunks(hw).enumerate() {
            db.data_mut()[co] += chunk.iter().copied().sum::<T>();
        }
        im2col(&x.data()[s * in_size..(s + 1) * in_size], &g, &mut cols);
        T::gemm(cout, hw, patch, T::one(), g_s, false, &cols, true, T::one(), dw.data_mut());
        T::gemm(patch, cout, hw, T::one(), weight.data(), true, g_s, false, T::zero(), &mut dcols);
        col2im(&dcols, &g, &mut dx.data_mut()[s * in_size..(s + 1) * in_size]);
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Zero-padded average pooling; the divisor is always `kernel`, padded
/// positions included.
pub fn avgpool1d<T: Real>(x: &Tensor<T>, kernel: usize, pad: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, len) = dims3(x, "avgpool1d")?;
    let out_len = window_out_len(len, kernel, pad, stride)
        .ok_or_else(|| Error::input(format!("avgpool1d: length {len} too short for kernel {kernel}")))?;
    let inv = T::one() / T::from_usize(kernel).unwrap();
    let mut out = Tensor::zeros(&[n, c, out_len]);
    for (row_in, row_out) in x.data().chunks(len).zip(out.data_mut().chunks_mut(out_len)) {
        for (t, o) in row_out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in 0..kernel {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    acc += row_in[pos as usize];
                }
            }
            *o = acc * inv;
        }
    }
    Ok(out)
}

pub fn avgpool1d_backward<T: Real>(
    in_dims: &[usize],
    kernel: usize,
    pad: usize,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, len] = *in_dims else {
        return Err(Error::input("avgpool1d backward: bad input dims"));
    };
    let out_len = window_out_len(len, kernel, pad, stride)
        .ok_or_else(|| Error::input("avgpool1d backward: bad geometry"))?;
    dy.expect_dims(&[n, c, out_len])?;
    let inv = T::one() / T::from_usize(kernel).unwrap();
    let mut dx = Tensor::zeros(in_dims);
    for (row_g, row_dx) in dy.data().chunks(out_len).zip(dx.data_mut().chunks_mut(len)) {
        for (t, &g) in row_g.iter().enumerate() {
            for j in 0..kernel {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    row_dx[pos as usize] += g * inv;
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over the spatial axes: `N x C x H x W -> N x C`.
pub fn global_avgpool2d<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "global_avgpool2d")?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = x.data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avgpool2d_backward<T: Real>(in_dims: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = *in_dims else {
        return Err(Error::input("global_avgpool2d backward: bad input dims"));
    };
    dy.expect_dims(&[n, c])?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut dx = Tensor::zeros(in_dims);
    for (ch, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        ch.fill(g * inv);
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Layout helper: returns (N, C, S) where S is the product of trailing dims.
fn bn_layout<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let d = x.dims();
    if d.len() < 2 {
        return Err(Error::input(format!("batchnorm expects N x C x ..., got {d:?}")));
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}

/// Per-channel statistics produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance of the batch.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BnOutput<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BnBatchStats<T>>,
}

/// Training-mode batch normalization using batch statistics.
pub fn batchnorm_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<BnOutput<T>> {
    let (n, c, s) = bn_layout(x)?;
    if n < 2 {
        return Err(Error::input(format!(
            "batchnorm in training mode needs at least 2 samples, got {n}"
        )));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::input("batchnorm: parameter width mismatch"));
    }
    let count = n * s;
    let inv_count = T::one() / T::from_usize(count).unwrap();
    let xs = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += xs[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_count);
    for i in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += xs[(i * c + ch) * s..(i * c + ch + 1) * s]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = bn_apply(x, &mean, &inv_std, gamma, beta, n, c, s);
    Ok(BnOutput {
        y,
        xhat,
        inv_std,
        stats: Some(BnBatchStats { mean, var, count }),
    })
}

/// Evaluation-mode batch normalization using running statistics.
pub fn batchnorm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<BnOutput<T>> {
    let (n, c, s) = bn_layout(x)?;
    if gamma.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::input("batchnorm: parameter width mismatch"));
    }
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = bn_apply(x, running_mean, &inv_std, gamma, beta, n, c, s);
    Ok(BnOutput {
        y,
        xhat,
        inv_std,
        stats: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn bn_apply<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    s: usize,
) -> (Tensor<T>, Tensor<T>) {
    let mut y = Tensor::zeros(x.dims());
    let mut xhat = Tensor::zeros(x.dims());
    let xs = x.data();
    let yd = y.data_mut();
    let hd = xhat.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            for idx in r {
                let h = (xs[idx] - mean[ch]) * inv_std[ch];
                hd[idx] = h;
                yd[idx] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Gradients of batch normalization: `(dx, dgamma, dbeta)`. `batch_stats`
/// selects the training-mode formula (statistics depend on the input).
pub fn batchnorm_backward<T: Real>(
    out: &BnOutput<T>,
    gamma: &[T],
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, s) = bn_layout(dy)?;
    dy.expect_dims(out.xhat.dims())?;
    let gs = dy.data();
    let hs = out.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            for idx in (i * c + ch) * s..(i * c + ch + 1) * s {
                dgamma[ch] += gs[idx] * hs[idx];
                dbeta[ch] += gs[idx];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.dims());
    let dxd = dx.data_mut();
    match &out.stats {
        Some(stats) => {
            let m = T::from_usize(stats.count).unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let k = gamma[ch] * out.inv_std[ch] / m;
                    for idx in (i * c + ch) * s..(i * c + ch + 1) * s {
                        dxd[idx] = k * (m * gs[idx] - dbeta[ch] - hs[idx] * dgamma[ch]);
                    }
                }
            }
        }
        None => {
            for i in 0..n {
                for ch in 0..c {
                    let k = gamma[ch] * out.inv_std[ch];
                    for idx in (i * c + ch) * s..(i * c + ch + 1) * s {
                        dxd[idx] = k * gs[idx];
                    }
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Upstream gradient masked by the sign of the forward input.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_dims(x.dims())?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.dims(), data)
}

pub fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout. Returns the output and the scaled keep-mask (`None` when
/// the layer acts as identity).
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    rng: Option<&mut R>,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    check_dropout_p(p)?;
    let Some(rng) = rng else {
        return Ok((x.clone(), None));
    };
    if p == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_vec(x.dims(), data)?, Some(mask)))
}

pub fn dropout_backward<T: Real>(mask: Option<&[T]>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(dy.clone()),
        Some(m) => {
            if m.len() != dy.len() {
                return Err(Error::state("dropout mask does not match gradient"));
            }
            let data = dy.data().iter().zip(m).map(|(&g, &k)| g * k).collect();
            Tensor::from_vec(dy.dims(), data)
        }
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// `y = x W^T + b` for `x: N x F`, `W: O x F`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, f] = *x.dims() else {
        return Err(Error::input(format!("linear expects N x F input, got {:?}", x.dims())));
    };
    let [o, wf] = *weight.dims() else {
        return Err(Error::input("linear weight must be 2-D"));
    };
    if wf != f || bias.dims() != [o] {
        return Err(Error::input(format!(
            "linear: input width {f}, weight {:?}, bias {:?}",
            weight.dims(),
            bias.dims()
        )));
    }
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_mut(o) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(n, f, o, T::one(), x.data(), false, weight.data(), true, T::one(), out.data_mut());
    Ok(out)
}

/// Gradients of [`linear`]: `(dx, dweight, dbias)`. `dx` is skipped when
/// `need_dx` is false.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [n, f] = *x.dims() else {
        return Err(Error::input("linear backward: bad input"));
    };
    let o = weight.dims()[0];
    dy.expect_dims(&[n, o])?;
    let mut dw = Tensor::zeros(weight.dims());
    T::gemm(o, n, f, T::one(), dy.data(), true, x.data(), false, T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[o]);
    for row in dy.data().chunks(o) {
        for (b, &g) in db.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let dx = if need_dx {
        let mut dx = Tensor::zeros(&[n, f]);
        T::gemm(n, o, f, T::one(), dy.data(), false, weight.data(), false, T::zero(), dx.data_mut());
        Some(dx)
    } else {
        None
    };
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = *logits.dims() else {
        return Err(Error::input("softmax expects N x K logits"));
    };
    if !logits.all_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of softmax probabilities against integer labels.
/// Returns `(loss, probs)`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, k] = *logits.dims() else {
        return Err(Error::input("cross-entropy expects N x K logits"));
    };
    if labels.len() != n {
        return Err(Error::input(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!("label {bad} outside [0, {k})")));
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for ((row, lrow), &y) in probs.rows().zip(logits.rows()).zip(labels) {
        // log-sum-exp form keeps the loss finite when the true probability underflows
        let m = lrow.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + lrow.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - lrow[y];
        debug_assert!(row[y] >= T::zero());
    }
    loss /= T::from_usize(n.max(1)).unwrap();
    Ok((loss, probs))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let [n, k] = *probs.dims() else {
        return Err(Error::input("cross-entropy backward expects N x K"));
    };
    let inv_n = T::one() / T::from_usize(n.max(1)).unwrap();
    let mut d = probs.clone();
    for (row, &y) in d.data_mut().chunks_mut(k).zip(labels) {
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv1d_delta_kernel_copies_input() {
        let x = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv1d(&x, &w, &b, 0, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv1d_matches_loop_oracle() {
        let x = rand_tensor(&[2, 3, 8], 1);
        let w = rand_tensor(&[4, 3, 3], 2);
        let b = rand_tensor(&[4], 3);
        for (pad, stride) in [(0, 1), (1, 2), (2, 3)] {
            let y = conv1d(&x, &w, &b, pad, stride).unwrap();
            let lo = (8 + 2 * pad - 3) / stride + 1;
            assert_eq!(y.dims(), &[2, 4, lo]);
            for n in 0..2 {
                for co in 0..4 {
                    for t in 0..lo {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for j in 0..3 {
                                let p = (t * stride + j) as isize - pad as isize;
                                if (0..8).contains(&p) {
                                    acc += w.data()[(co * 3 + ci) * 3 + j] * x.data()[(n * 3 + ci) * 8 + p as usize];
                                }
                            }
                        }
                        assert!((acc - y.data()[(n * 4 + co) * lo + t]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv1d_table_geometry() {
        let x = Tensor::<f32>::zeros(&[1, 2, 290]);
        let w = Tensor::zeros(&[4, 2, 3]);
        let y = conv1d(&x, &w, &Tensor::zeros(&[4]), 0, 1).unwrap();
        assert_eq!(y.dims(), &[1, 4, 288]);
    }

    #[test]
    fn conv1d_rejects_short_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2]);
        let w = Tensor::zeros(&[1, 1, 3]);
        assert!(conv1d(&x, &w, &Tensor::zeros(&[1]), 0, 1).is_err());
        let w_bad = Tensor::zeros(&[1, 2, 1]);
        assert!(conv1d(&x, &w_bad, &Tensor::zeros(&[1]), 0, 1).is_err());
    }

    #[test]
    fn conv2d_delta_kernel_is_identity_and_shapes() {
        let x = rand_tensor(&[1, 2, 5, 5], 4);
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[2]), 0, 1).unwrap();
        assert_eq!(y, x);

        let x = Tensor::<f32>::zeros(&[1, 3, 64, 64]);
        let w = Tensor::zeros(&[16, 3, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[16]), 1, 2).unwrap();
        assert_eq!(y.dims(), &[1, 16, 32, 32]);
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let x = rand_tensor(&[2, 2, 5, 6], 5);
        let w = rand_tensor(&[3, 2, 3, 3], 6);
        let b = rand_tensor(&[3], 7);
        let (pad, stride) = (1, 2);
        let y = conv2d(&x, &w, &b, pad, stride).unwrap();
        let (oh, ow) = ((5 + 2 - 3) / 2 + 1, (6 + 2 - 3) / 2 + 1);
        assert_eq!(y.dims(), &[2, 3, oh, ow]);
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                        acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                            * x.data()[((n * 2 + ci) * 5 + iy as usize) * 6 + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((n * 3 + co) * oh + oy) * ow + ox];
                        assert!((acc - got).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn avgpool_counts_padding() {
        let x = Tensor::from_vec(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avgpool1d(&x, 3, 1, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);

        let c = 2.5f64;
        let x = Tensor::full(&[1, 1, 11], c);
        let y = avgpool1d(&x, 3, 1, 2).unwrap();
        let d = y.data();
        assert!((d[0] - 2.0 * c / 3.0).abs() < 1e-12);
        assert!((d[d.len() - 1] - 2.0 * c / 3.0).abs() < 1e-12);
        for &v in &d[1..d.len() - 1] {
            assert!((v - c).abs() < 1e-12);
        }

        let x = Tensor::<f32>::zeros(&[1, 1, 288]);
        assert_eq!(avgpool1d(&x, 3, 1, 2).unwrap().dims(), &[1, 1, 144]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let x = rand_tensor(&[8, 3, 5], 8).map(|v| 3.0 * v + 1.5);
        let gamma = [1.0, 2.0, 0.5];
        let beta = [0.0, -1.0, 3.0];
        let out = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|i| out.y.data()[(i * 3 + ch) * 5..(i * 3 + ch + 1) * 5].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((m - beta[ch]).abs() < 1e-6);
            assert!((sd - gamma[ch]).abs() < 1e-3 * gamma[ch]);
        }
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4]);
        assert!(matches!(
            batchnorm_train(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn batchnorm_identity_on_standardized_batch() {
        let x = Tensor::<f64>::from_vec(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let out = batchnorm_train(&x, &[1.0], &[0.0], 1e-5).unwrap();
        for (a, b) in out.y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_and_backward() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        let g = relu_backward(&x, &Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn dropout_behaviour() {
        let x = Tensor::<f64>::full(&[100_000], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (y, _) = dropout(&x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(y, x);
        let (y, mask) = dropout(&x, 0.5, Some(&mut rng)).unwrap();
        assert!(mask.is_some());
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        let (y, _) = dropout::<f64, ChaCha8Rng>(&x, 0.5, None).unwrap();
        assert_eq!(y, x);
        assert!(matches!(
            dropout(&x, 1.0, Some(&mut rng)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(dropout(&x, -0.1, Some(&mut rng)).is_err());
    }

    #[test]
    fn linear_backward_weight_matches_loop_oracle() {
        let x = rand_tensor(&[2, 3], 10);
        let w = rand_tensor(&[4, 3], 11);
        let dy = rand_tensor(&[2, 4], 12);
        let (dx, dw, db) = linear_backward(&x, &w, &dy, true).unwrap();
        for o in 0..4 {
            for f in 0..3 {
                let want: f64 = (0..2).map(|n| dy.data()[n * 4 + o] * x.data()[n * 3 + f]).sum();
                assert!((dw.data()[o * 3 + f] - want).abs() < 1e-12);
            }
            let want: f64 = (0..2).map(|n| dy.data()[n * 4 + o]).sum();
            assert!((db.data()[o] - want).abs() < 1e-12);
        }
        let dx = dx.unwrap();
        for n in 0..2 {
            for f in 0..3 {
                let want: f64 = (0..4).map(|o| dy.data()[n * 4 + o] * w.data()[o * 3 + f]).sum();
                assert!((dx.data()[n * 3 + f] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.1).abs() < 1e-15));

        let mut logits = Tensor::<f64>::zeros(&[1, 10]);
        logits.data_mut()[3] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(loss.abs() < 1e-12);

        let mut logits = Tensor::<f64>::zeros(&[1, 2]);
        logits.data_mut()[0] = f64::NAN;
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0]),
            Err(Error::Numerical(_))
        ));
        assert!(softmax_cross_entropy(&Tensor::<f64>::zeros(&[1, 2]), &[2]).is_err());
    }
}

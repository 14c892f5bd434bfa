//! Layer primitives over `[N, C, H, W]` tensors.
//!
//! Every forward function returns its output together with whatever the
//! matching backward function needs. Convolution is cross-correlation
//! (kernels are not flipped).

use super::direct::{self, Padded};
use super::tensor::{lane_sum, matmul, MatRef, Real, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::derive_seed;

/// Train or inference behaviour for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Convolution

/// Saved input of a convolution.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input: ConvInput<T>,
    input_shape: [usize; 4],
}

#[derive(Debug, Clone)]
enum ConvInput<T> {
    /// 3x3: zero-padded planes for the direct kernels.
    Padded(Padded<T>),
    /// 1x1: input as a `[C, N*H*W]` matrix.
    ChannelMajor(Vec<T>),
}

fn conv_dims<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, padding: usize)
    -> Result<([usize; 4], usize, usize)>
{
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return Err(Error::Shape(format!(
            "convolution expects {ci} input channels, got {c}"
        )));
    }
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::Shape(format!("unsupported kernel {kh}x{kw}")));
    }
    if padding != (kh - 1) / 2 {
        return Err(Error::InvalidArgument(format!(
            "{kh}x{kw} kernel needs padding {}, got {padding}",
            (kh - 1) / 2
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {o} output channels",
            bias.shape()
        )));
    }
    Ok(([n, c, h, w], o, kh))
}

/// `[N, C, H, W]` <-> `[C, N*H*W]`
fn nchw_to_channel_major<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw]
                .copy_from_slice(&x[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
        }
    }
    out
}

fn channel_major_to_nchw<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .copy_from_slice(&x[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw]);
        }
    }
    out
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (shape, o, k) = conv_dims(x, weight, bias, padding)?;
    let [n, c, h, w] = shape;
    let hw = h * w;
    let (y, input) = if k == 3 {
        let xp = Padded::new(x.data(), n, c, h, w);
        let wd = weight.data();
        let packed = direct::pack(o, c, |oc, ic, t| wd[(oc * c + ic) * 9 + t]);
        let y = direct::correlate(&xp, n, &packed, o, Some(bias.data()));
        (y, ConvInput::Padded(xp))
    } else {
        let cols = nchw_to_channel_major(x.data(), n, c, hw);
        let mut ym = vec![T::ZERO; o * n * hw];
        matmul(
            MatRef::row_major(weight.data(), o, c),
            MatRef::row_major(&cols, c, n * hw),
            &mut ym,
            false,
        );
        for (oc, row) in ym.chunks_exact_mut(n * hw).enumerate() {
            let bv = bias.data()[oc];
            row.iter_mut().for_each(|v| *v += bv);
        }
        (channel_major_to_nchw(&ym, n, o, hw), ConvInput::ChannelMajor(cols))
    };
    Ok((
        Tensor::from_vec(&[n, o, h, w], y)?,
        ConvCache {
            input,
            input_shape: shape,
        },
    ))
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when not requested.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = cache.input_shape;
    let (o, wc, k, _) = weight.dims4()?;
    if dy.shape() != [n, o, h, w] || wc != c {
        return Err(Error::Shape(format!(
            "conv output gradient {:?} does not match [{n}, {o}, {h}, {w}]",
            dy.shape()
        )));
    }
    let hw = h * w;
    let (dx, dw, db) = match &cache.input {
        ConvInput::Padded(xp) => {
            if k != 3 {
                return Err(Error::Shape("kernel size changed between forward and backward".into()));
            }
            let (dw, db) = direct::weight_grad(xp, dy.data(), n, o);
            let dx = need_input_grad.then(|| {
                // dx is dy correlated with the flipped, transposed kernel
                let wd = weight.data();
                let packed = direct::pack(c, o, |ic, oc, t| wd[(oc * c + ic) * 9 + (8 - t)]);
                direct::correlate(&Padded::new(dy.data(), n, o, h, w), n, &packed, c, None)
            });
            (dx, dw, db)
        }
        ConvInput::ChannelMajor(cols) => {
            if k != 1 {
                return Err(Error::Shape("kernel size changed between forward and backward".into()));
            }
            let dym = nchw_to_channel_major(dy.data(), n, o, hw);
            let mut dw = vec![T::ZERO; o * c];
            matmul(
                MatRef::row_major(&dym, o, n * hw),
                MatRef::row_major(cols, c, n * hw).t(),
                &mut dw,
                false,
            );
            let db = dym.chunks_exact(n * hw).map(|r| r.iter().copied().sum()).collect();
            let dx = need_input_grad.then(|| {
                let mut dcols = vec![T::ZERO; c * n * hw];
                matmul(
                    MatRef::row_major(weight.data(), o, c).t(),
                    MatRef::row_major(&dym, o, n * hw),
                    &mut dcols,
                    false,
                );
                channel_major_to_nchw(&dcols, n, c, hw)
            });
            (dx, dw, db)
        }
    };
    let dx = dx.map(|d| Tensor::from_vec(&[n, c, h, w], d)).transpose()?;
    Ok((dx, Tensor::from_vec(weight.shape(), dw)?, Tensor::from_vec(&[o], db)?))
}

// ---------------------------------------------------------------------------
// Batch normalisation

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 4],
    mode: Mode,
}

/// Per-channel batch statistics from a train-mode pass: `(mean, unbiased
/// variance)`, ready to fold into the running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>, Option<BatchStats<T>>)> {
    let (n, c, h, w) = x.dims4()?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", running_mean),
        ("running var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::Shape(format!(
                "batch norm {name} has shape {:?}, expected [{c}]",
                t.shape()
            )));
        }
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::InvalidState(
            "train-mode batch norm needs a batch of at least 2".into(),
        ));
    }
    let hw = h * w;
    let count = n * hw;
    let eps = T::from_f64(BN_EPSILON);
    let xd = x.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    let mut stats = None;
    match mode {
        Mode::Train => {
            let inv_count = T::ONE / T::from_f64(count as f64);
            for ch in 0..c {
                let plane = |b: usize| &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let s: T = (0..n).map(|b| lane_sum(plane(b), plane(b), |v, _| v)).sum();
                let m = s * inv_count;
                let ss: T = (0..n)
                    .map(|b| lane_sum(plane(b), plane(b), |v, _| (v - m) * (v - m)))
                    .sum();
                mean[ch] = m;
                var[ch] = ss * inv_count;
            }
            let unbias = T::from_f64(count as f64 / (count - 1) as f64);
            stats = Some(BatchStats {
                mean: mean.clone(),
                var_unbiased: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        Mode::Eval => {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; xd.len()];
    let mut y = vec![T::ZERO; xd.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (m, is, gv, bv) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
            for ((xh, yv), &v) in xhat[range.clone()]
                .iter_mut()
                .zip(&mut y[range.clone()])
                .zip(&xd[range])
            {
                *xh = (v - m) * is;
                *yv = *xh * gv + bv;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BatchNormCache {
            xhat,
            inv_std,
            shape: [n, c, h, w],
            mode,
        },
        stats,
    ))
}

/// Folds batch statistics into running estimates with momentum 0.1.
pub fn update_running_stats<T: Real>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BatchStats<T>,
) {
    let m = T::from_f64(BN_MOMENTUM);
    let keep = T::from_f64(1.0 - BN_MOMENTUM);
    for (r, &s) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * s;
    }
    for (r, &s) in running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
        *r = keep * *r + m * s;
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = cache.shape;
    if dy.shape() != [n, c, h, w] {
        return Err(Error::Shape(format!("batch norm gradient shape {:?}", dy.shape())));
    }
    let hw = h * w;
    let count = T::from_f64((n * hw) as f64);
    let dyd = dy.data();
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            dbeta[ch] += lane_sum(&dyd[range.clone()], &dyd[range.clone()], |g, _| g);
            dgamma[ch] += lane_sum(&dyd[range.clone()], &cache.xhat[range], |g, xh| g * xh);
        }
    }
    let gd = gamma.data();
    let mut dx = vec![T::ZERO; dyd.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let scale = gd[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let mb = dbeta[ch] / count;
                    let mg = dgamma[ch] / count;
                    for ((d, &g), &xh) in dx[range.clone()]
                        .iter_mut()
                        .zip(&dyd[range.clone()])
                        .zip(&cache.xhat[range])
                    {
                        *d = scale * (g - mb - xh * mg);
                    }
                }
                Mode::Eval => {
                    for (d, &g) in dx[range.clone()].iter_mut().zip(&dyd[range]) {
                        *d = scale * g;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(dy.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

// ---------------------------------------------------------------------------
// Pointwise

/// ReLU; the returned mask marks positive inputs.
pub fn relu_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::ZERO).collect();
    let y = x.map(|v| if v > T::ZERO { v } else { T::ZERO });
    (y, mask)
}

pub fn relu_backward<T: Real>(mask: &[bool], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(mask)
        .for_each(|(d, &m)| if !m { *d = T::ZERO });
    dx
}

pub fn sigmoid_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::ONE / (T::ONE + (-v).exp()))
}

/// Backward through the sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(d, &p)| *d *= p * (T::ONE - p));
    dx
}

/// Inverted dropout. In train mode each element is zeroed with probability
/// `p` and survivors are scaled by `1 / (1 - p)`; the returned factors are
/// what backward multiplies by. Eval mode (or `p == 0`) is the identity.
pub fn dropout_forward<T: Real>(
    x: &Tensor<T>,
    p: f64,
    seed: u64,
    mode: Mode,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    // Counter-based draws: element i is dropped when the top 32 bits of
    // hash(seed, i) fall below p * 2^32.
    let threshold = (p * 4_294_967_296.0) as u64;
    let factors: Vec<T> = (0..x.len() as u64)
        .map(|i| if derive_seed(seed, i) >> 32 < threshold { T::ZERO } else { keep })
        .collect();
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(&factors).for_each(|(v, &f)| *v *= f);
    Ok((y, Some(factors)))
}

pub fn dropout_backward<T: Real>(factors: Option<&[T]>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    if let Some(f) = factors {
        dx.data_mut().iter_mut().zip(f).for_each(|(d, &k)| *d *= k);
    }
    dx
}

// ---------------------------------------------------------------------------
// Pooling and resampling

/// 2x2 max pooling with stride 2. Gradient goes to the first maximum in
/// row-major window order.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let cands = [
                    base + 2 * r * w + 2 * col,
                    base + 2 * r * w + 2 * col + 1,
                    base + (2 * r + 1) * w + 2 * col,
                    base + (2 * r + 1) * w + 2 * col + 1,
                ];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                y.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], y)?, arg))
}

pub fn maxpool2_backward<T: Real>(
    argmax: &[usize],
    input_shape: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if dy.len() != argmax.len() {
        return Err(Error::Shape("max pooling gradient size mismatch".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Corner-aligned interpolation taps along one axis: for each output index
/// `(lo, hi, t)` with value `(1 - t) * in[lo] + t * in[hi]`.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let s = if n_out <= 1 || n_in <= 1 {
                0.0
            } else {
                (i * (n_in - 1)) as f64 / (n_out - 1) as f64
            };
            let lo = (s.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize of each plane, corner-aligned.
pub fn resize_bilinear_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be non-empty".into()));
    }
    let rt = taps(h, out_h);
    let ct = taps(w, out_w);
    let xd = x.data();
    let mut y = vec![T::ZERO; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (r, &(r0, r1, tr)) in rt.iter().enumerate() {
            let tr = T::from_f64(tr);
            for (cc, &(c0, c1, tc)) in ct.iter().enumerate() {
                let tc = T::from_f64(tc);
                let top = src[r0 * w + c0] + (src[r0 * w + c1] - src[r0 * w + c0]) * tc;
                let bot = src[r1 * w + c0] + (src[r1 * w + c1] - src[r1 * w + c0]) * tc;
                dst[r * out_w + cc] = top + (bot - top) * tr;
            }
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], y)
}

pub fn resize_bilinear_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, out_h, out_w) = dy.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    if input_shape[..2] != [n, c] {
        return Err(Error::Shape("resize gradient batch/channel mismatch".into()));
    }
    let rt = taps(h, out_h);
    let ct = taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    let dd = dx.data_mut();
    let g = dy.data();
    for plane in 0..n * c {
        let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
        let src = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (r, &(r0, r1, tr)) in rt.iter().enumerate() {
            let tr = T::from_f64(tr);
            for (cc, &(c0, c1, tc)) in ct.iter().enumerate() {
                let tc = T::from_f64(tc);
                let v = src[r * out_w + cc];
                let top = v * (T::ONE - tr);
                let bot = v * tr;
                dst[r0 * w + c0] += top * (T::ONE - tc);
                dst[r0 * w + c1] += top * tc;
                dst[r1 * w + c0] += bot * (T::ONE - tc);
                dst[r1 * w + c1] += bot * tc;
            }
        }
    }
    Ok(dx)
}

pub fn upsample2_bilinear_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear_forward(x, 2 * h, 2 * w)
}

pub fn upsample2_bilinear_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    resize_bilinear_backward(input_shape, dy)
}

/// Bin `i` of `out` over an axis of length `n`: `[floor(i*n/out), ceil((i+1)*n/out))`.
fn adaptive_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * n) / out, ((i + 1) * n).div_ceil(out)))
        .collect()
}

pub fn adaptive_avgpool_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Shape(format!(
            "cannot pool {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let rb = adaptive_bins(h, out_h);
    let cb = adaptive_bins(w, out_w);
    let xd = x.data();
    let mut y = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for &(r0, r1) in &rb {
            for &(c0, c1) in &cb {
                let mut s = T::ZERO;
                for r in r0..r1 {
                    s += src[r * w + c0..r * w + c1].iter().copied().sum();
                }
                y.push(s / T::from_f64(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], y)
}

pub fn adaptive_avgpool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, out_h, out_w) = dy.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let rb = adaptive_bins(h, out_h);
    let cb = adaptive_bins(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    let dd = dx.data_mut();
    let g = dy.data();
    for plane in 0..n * c {
        let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
        for (i, &(r0, r1)) in rb.iter().enumerate() {
            for (j, &(c0, c1)) in cb.iter().enumerate() {
                let v = g[plane * out_h * out_w + i * out_w + j]
                    / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    dst[r * w + c0..r * w + c1].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Channel concatenation

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        total += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[b * pc * hw..(b + 1) * pc * hw]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], out)
}

/// Splits a channel gradient back into the concatenated parts.
pub fn split_channels<T: Real>(dy: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = dy.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::Shape(format!(
            "channel split {channels:?} does not sum to {c}"
        )));
    }
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    for b in 0..n {
        let mut off = 0;
        for (o, &pc) in outs.iter_mut().zip(channels) {
            let start = (b * c + off) * hw;
            o.extend_from_slice(&dy.data()[start..start + pc * hw]);
            off += pc;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::from_vec(&[n, pc, h, w], d))
        .collect()
}

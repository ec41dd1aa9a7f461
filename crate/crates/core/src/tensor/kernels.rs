//! Forward and backward kernels on plain tensors.
//!
//! These are the numerical building blocks; [`crate::autograd::Graph`] records
//! them and wires the backward halves together. Reductions (means, variances,
//! per-channel sums, depthwise taps) accumulate in `f64`. Standard
//! convolutions lower to im2col followed by a GEMM.

use super::element::{matmul, MatRef};
use super::{macs, Element, Tensor};
use crate::error::{Error, Result};

/// How to treat `(H + 2·padding − k)` not divisible by the stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Rounding {
    /// Reject sizes that do not divide evenly.
    #[default]
    Exact,
    /// Drop the trailing partial window.
    Floor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub rounding: Rounding,
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, rounding: Rounding::Exact }
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

/// Output side length of a sliding window.
pub fn window_output_size(input: usize, kernel: usize, stride: usize, padding: usize, rounding: Rounding) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(format!(
            "window {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    let span = padded - kernel;
    if rounding == Rounding::Exact && !span.is_multiple_of(stride) {
        return Err(Error::config(format!(
            "output size ({input} + 2·{padding} − {kernel})/{stride} + 1 is not an integer"
        )));
    }
    Ok(span / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn plane_in(&self) -> usize {
        self.h * self.w
    }

    fn plane_out(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_geom<T: Element>(x: &Tensor<T>, w: &Tensor<T>, p: Conv2dParams, depthwise: bool) -> Result<ConvGeom> {
    let [n, c_in, h, wd] = x.dims4("convolution input")?;
    let [c_out, k_in, kh, kw] = w.dims4("convolution kernel")?;
    if depthwise {
        if c_out != c_in || k_in != 1 {
            return Err(Error::shape(format!(
                "depthwise kernel must be [{c_in}, 1, k, k] for {c_in} input channels, got {:?}",
                w.shape()
            )));
        }
    } else if k_in != c_in {
        return Err(Error::shape(format!(
            "kernel expects {k_in} input channels but input has {c_in} (input {:?}, kernel {:?})",
            x.shape(),
            w.shape()
        )));
    }
    let oh = window_output_size(h, kh, p.stride, p.padding, p.rounding)?;
    let ow = window_output_size(wd, kw, p.stride, p.padding, p.rounding)?;
    Ok(ConvGeom { n, c_in, h, w: wd, c_out, kh, kw, stride: p.stride, pad: p.padding, oh, ow })
}

/// Output positions `[lo, hi)` whose window tap at offset `k` lands inside
/// an input of length `len`.
fn tap_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad <= k { 0 } else { (len + pad - k).div_ceil(stride) };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

/// Unfolds input windows into a `[c_in·kh·kw, n·oh·ow]` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.plane_out();
    let rows = g.c_in * g.kh * g.kw;
    let mut cols = vec![T::zero(); rows * np];
    if g.is_pointwise() {
        let p = g.plane_in();
        for c in 0..g.c_in {
            for n in 0..g.n {
                let src = &x[(n * g.c_in + c) * p..][..p];
                cols[c * np + n * p..][..p].copy_from_slice(src);
            }
        }
        return cols;
    }
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            let (y0, y1) = tap_range(g.oh, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (x0, x1) = tap_range(g.ow, g.w, kj, g.stride, g.pad);
                if x0 >= x1 {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np..][..np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c_in + c) * g.plane_in()..][..g.plane_in()];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let src_row = &plane[iy * g.w..][..g.w];
                        let out_row = &mut dst[n * g.plane_out() + oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let ix0 = x0 + kj - g.pad;
                            out_row[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                out_row[ox] = src_row[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.plane_out();
    let mut dx = vec![T::zero(); g.n * g.c_in * g.plane_in()];
    if g.is_pointwise() {
        let p = g.plane_in();
        for c in 0..g.c_in {
            for n in 0..g.n {
                dx[(n * g.c_in + c) * p..][..p].copy_from_slice(&cols[c * np + n * p..][..p]);
            }
        }
        return dx;
    }
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            let (y0, y1) = tap_range(g.oh, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (x0, x1) = tap_range(g.ow, g.w, kj, g.stride, g.pad);
                if x0 >= x1 {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np..][..np];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c_in + c) * g.plane_in()..][..g.plane_in()];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let dst_row = &mut plane[iy * g.w..][..g.w];
                        let in_row = &src[n * g.plane_out() + oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let ix0 = x0 + kj - g.pad;
                            for (d, &v) in dst_row[ix0..].iter_mut().zip(&in_row[x0..x1]) {
                                *d = *d + v;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = ox * g.stride + kj - g.pad;
                                dst_row[ix] = dst_row[ix] + in_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[c, n·p]` channel-major matrix to `[n, c, p]`.
fn channel_major_to_nchw<T: Element>(mat: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&mat[ci * n * p + ni * p..][..p]);
        }
    }
    out
}

fn nchw_to_channel_major<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for ci in 0..c {
        for ni in 0..n {
            out[ci * n * p + ni * p..][..p].copy_from_slice(&x[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// Standard 2-D convolution without bias: every output channel takes a dot
/// product over all input channels of its window.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, p: Conv2dParams) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, p, false)?;
    let k = g.c_in * g.kh * g.kw;
    let np = g.n * g.plane_out();
    let cols = im2col(x.data(), &g);
    let mut out_mat = vec![T::zero(); g.c_out * np];
    matmul(MatRef::new(w.data(), g.c_out, k), MatRef::new(&cols, k, np), &mut out_mat, false);
    macs::add(g.c_out * k * np);
    let out = channel_major_to_nchw(&out_mat, g.n, g.c_out, g.plane_out());
    Tensor::from_vec(&[g.n, g.c_out, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to the input and the kernel.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: Conv2dParams,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = conv_geom(x, w, p, false)?;
    let k = g.c_in * g.kh * g.kw;
    let np = g.n * g.plane_out();
    let dy = nchw_to_channel_major(grad_out.data(), g.n, g.c_out, g.plane_out());
    let dw = if need_kernel {
        let cols = im2col(x.data(), &g);
        let mut dw = vec![T::zero(); g.c_out * k];
        matmul(MatRef::new(&dy, g.c_out, np), MatRef::t(&cols, k, np), &mut dw, false);
        Some(Tensor::from_vec(w.shape(), dw)?)
    } else {
        None
    };
    let dx = if need_input {
        let mut dcols = vec![T::zero(); k * np];
        matmul(MatRef::t(w.data(), g.c_out, k), MatRef::new(&dy, g.c_out, np), &mut dcols, false);
        Some(Tensor::from_vec(x.shape(), col2im(&dcols, &g))?)
    } else {
        None
    };
    Ok((dx, dw))
}

/// 1×1 convolution: a per-pixel linear mix of channels.
pub fn pointwise_conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, kh, kw] = w.dims4("pointwise kernel")?;
    if kh != 1 || kw != 1 {
        return Err(Error::shape(format!("pointwise kernel must be 1×1, got {:?}", w.shape())));
    }
    conv2d(x, w, Conv2dParams::new(1, 0))
}

/// One spatial filter per channel; output channel `c` sees only input channel `c`.
pub fn depthwise_conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, p: Conv2dParams) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, p, true)?;
    let (pin, pout, taps_len) = (g.plane_in(), g.plane_out(), g.kh * g.kw);
    let mut out = vec![T::zero(); g.n * g.c_in * pout];
    let mut acc = vec![0.0f64; pout];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane = &x.data()[(n * g.c_in + c) * pin..][..pin];
            let taps = &w.data()[c * taps_len..][..taps_len];
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ki in 0..g.kh {
                let (y0, y1) = tap_range(g.oh, g.h, ki, g.stride, g.pad);
                for kj in 0..g.kw {
                    let (x0, x1) = tap_range(g.ow, g.w, kj, g.stride, g.pad);
                    if x0 >= x1 {
                        continue;
                    }
                    let t = taps[ki * g.kw + kj].widen();
                    for oy in y0..y1 {
                        let src = &plane[(oy * g.stride + ki - g.pad) * g.w..][..g.w];
                        let dst = &mut acc[oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let ix0 = x0 + kj - g.pad;
                            for (a, v) in dst[x0..x1].iter_mut().zip(&src[ix0..]) {
                                *a += t * v.widen();
                            }
                        } else {
                            for ox in x0..x1 {
                                dst[ox] += t * src[ox * g.stride + kj - g.pad].widen();
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(n * g.c_in + c) * pout..][..pout];
            for (o, a) in dst.iter_mut().zip(&acc) {
                *o = T::cast(*a);
            }
        }
    }
    macs::add(g.c_in * taps_len * g.n * pout);
    Tensor::from_vec(&[g.n, g.c_in, g.oh, g.ow], out)
}

pub fn depthwise_conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: Conv2dParams,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = conv_geom(x, w, p, true)?;
    let (pin, pout, taps_len) = (g.plane_in(), g.plane_out(), g.kh * g.kw);
    let mut dx = need_input.then(|| vec![T::zero(); g.n * g.c_in * pin]);
    let mut dw = need_kernel.then(|| vec![0.0f64; g.c_in * taps_len]);
    let mut acc = vec![0.0f64; pin];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let base_in = (n * g.c_in + c) * pin;
            let plane = &x.data()[base_in..][..pin];
            let taps = &w.data()[c * taps_len..][..taps_len];
            let dy = &grad_out.data()[(n * g.c_in + c) * pout..][..pout];
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ki in 0..g.kh {
                let (y0, y1) = tap_range(g.oh, g.h, ki, g.stride, g.pad);
                for kj in 0..g.kw {
                    let (x0, x1) = tap_range(g.ow, g.w, kj, g.stride, g.pad);
                    if x0 >= x1 {
                        continue;
                    }
                    let t = taps[ki * g.kw + kj].widen();
                    let mut dot = 0.0f64;
                    for oy in y0..y1 {
                        let row = (oy * g.stride + ki - g.pad) * g.w;
                        let gy = &dy[oy * g.ow..][..g.ow];
                        for ox in x0..x1 {
                            let at = row + ox * g.stride + kj - g.pad;
                            let gv = gy[ox].widen();
                            acc[at] += t * gv;
                            dot += plane[at].widen() * gv;
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[c * taps_len + ki * g.kw + kj] += dot;
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                for (d, a) in dx[base_in..][..pin].iter_mut().zip(&acc) {
                    *d = T::cast(*a);
                }
            }
        }
    }
    let dx = dx.map(|v| Tensor::from_vec(x.shape(), v)).transpose()?;
    let dw = dw.map(|v| Tensor::from_vec(w.shape(), v.into_iter().map(T::cast).collect())).transpose()?;
    Ok((dx, dw))
}

/// Per-channel statistics saved by a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch, or the running variance
    /// in evaluation mode.
    pub var: Vec<f64>,
    pub invstd: Vec<f64>,
}

fn bn_check<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("batchnorm input must be at least 2-D, got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    let p: usize = x.shape()[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batchnorm affine parameters must be [{c}], got gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, p))
}

fn bn_apply<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, stats: &NormStats) -> Result<Tensor<T>> {
    let (n, c, p) = bn_check(x, gamma, beta)?;
    let mut out = vec![T::zero(); x.numel()];
    for ci in 0..c {
        let scale = gamma.data()[ci].widen() * stats.invstd[ci];
        let shift = beta.data()[ci].widen() - stats.mean[ci] * scale;
        for ni in 0..n {
            let off = (ni * c + ci) * p;
            for (o, &v) in out[off..off + p].iter_mut().zip(&x.data()[off..off + p]) {
                *o = T::cast(v.widen() * scale + shift);
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Normalizes with the batch's own per-channel statistics.
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats)> {
    let (n, c, p) = bn_check(x, gamma, beta)?;
    let count = n * p;
    if count < 2 {
        return Err(Error::shape(format!(
            "batchnorm in train mode needs at least 2 values per channel, got N·H·W = {count}"
        )));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += x.data()[(ni * c + ci) * p..][..p].iter().map(|v| v.widen()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0;
        for ni in 0..n {
            ss += x.data()[(ni * c + ci) * p..][..p].iter().map(|v| (v.widen() - m).powi(2)).sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = ss / count as f64;
    }
    let invstd = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let stats = NormStats { mean, var, invstd };
    Ok((bn_apply(x, gamma, beta, &stats)?, stats))
}

/// Normalizes with fixed (running) statistics.
pub fn batchnorm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats)> {
    let (_, c, _) = bn_check(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape(format!("batchnorm running statistics must be [{c}]")));
    }
    let mean = running_mean.to_f64_vec();
    let var = running_var.to_f64_vec();
    let invstd = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let stats = NormStats { mean, var, invstd };
    Ok((bn_apply(x, gamma, beta, &stats)?, stats))
}

/// Gradients of batch norm. With `batch_stats` the mean and variance are
/// functions of the input and contribute to its gradient.
#[allow(clippy::type_complexity)]
pub fn batchnorm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    stats: &NormStats,
    batch_stats: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, p) = bn_check(x, gamma, gamma)?;
    let count = (n * p) as f64;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let (m, is) = (stats.mean[ci], stats.invstd[ci]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let off = (ni * c + ci) * p;
            for (&xv, &gv) in x.data()[off..off + p].iter().zip(&grad_out.data()[off..off + p]) {
                let g = gv.widen();
                sum_dy += g;
                sum_dy_xhat += g * (xv.widen() - m) * is;
            }
        }
        dgamma[ci] = T::cast(sum_dy_xhat);
        dbeta[ci] = T::cast(sum_dy);
        let gi = gamma.data()[ci].widen() * is;
        for ni in 0..n {
            let off = (ni * c + ci) * p;
            for j in off..off + p {
                let g = grad_out.data()[j].widen();
                let v = if batch_stats {
                    let xhat = (x.data()[j].widen() - m) * is;
                    gi * (g - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    gi * g
                };
                dx[j] = T::cast(v);
            }
        }
    }
    Ok((Tensor::from_vec(x.shape(), dx)?, Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?))
}

/// Average pooling with square windows, no padding, floor semantics.
pub fn avg_pool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("average pool input")?;
    let oh = window_output_size(h, kernel, stride, 0, Rounding::Floor)?;
    let ow = window_output_size(w, kernel, stride, 0, Rounding::Floor)?;
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane_idx, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[plane_idx * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ki in 0..kernel {
                    let row = &src[(oy * stride + ki) * w + ox * stride..][..kernel];
                    acc += row.iter().map(|v| v.widen()).sum::<f64>();
                }
                dst[oy * ow + ox] = T::cast(acc * norm);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn avg_pool2d_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let [_, _, oh, ow] = grad_out.dims4("average pool gradient")?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut dx = vec![0.0f64; input_shape.iter().product()];
    for (plane_idx, gy) in grad_out.data().chunks(oh * ow).enumerate() {
        let dst = &mut dx[plane_idx * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[oy * ow + ox].widen() * norm;
                for ki in 0..kernel {
                    for d in &mut dst[(oy * stride + ki) * w + ox * stride..][..kernel] {
                        *d += g;
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, dx.into_iter().map(T::cast).collect())
}

/// Max pooling with implicit −∞ padding and floor semantics. Returns the flat
/// input index of each selected element for the backward pass; ties pick the
/// first element in row-major window order.
pub fn max_pool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4("max pool input")?;
    let oh = window_output_size(h, kernel, stride, padding, Rounding::Floor)?;
    let ow = window_output_size(w, kernel, stride, padding, Rounding::Floor)?;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let src = &x.data()[base..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = iy as usize * w + ix as usize;
                        if best.is_none_or(|(b, _)| src[at] > b) {
                            best = Some((src[at], at));
                        }
                    }
                }
                let (v, at) = best.ok_or_else(|| Error::shape("max pool window lies entirely in padding"))?;
                let o = plane_idx * oh * ow + oy * ow + ox;
                out[o] = v;
                arg[o] = base + at;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, arg))
}

pub fn max_pool2d_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>, argmax: &[usize]) -> Result<Tensor<T>> {
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (&g, &at) in grad_out.data().iter().zip(argmax) {
        dx[at] = dx[at] + g;
    }
    Tensor::from_vec(input_shape, dx)
}

/// Mean over the spatial dimensions: `[N,C,H,W] → [N,C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("global average pool input")?;
    let p = h * w;
    let out = x
        .data()
        .chunks(p)
        .map(|plane| T::cast(plane.iter().map(|v| v.widen()).sum::<f64>() / p as f64))
        .collect();
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let p = input_shape[2] * input_shape[3];
    let inv = 1.0 / p as f64;
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for &g in grad_out.data() {
        let v = T::cast(g.widen() * inv);
        dx.extend(std::iter::repeat_n(v, p));
    }
    Tensor::from_vec(input_shape, dx)
}

/// Stacks tensors along dimension 1; all other dimensions must agree.
pub fn channel_concat<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("channel_concat needs at least one tensor"))?;
    if first.rank() < 2 {
        return Err(Error::shape("channel_concat needs tensors of rank >= 2"));
    }
    let n = first.shape()[0];
    let rest = &first.shape()[2..];
    let inner: usize = rest.iter().product();
    let mut total_c = 0;
    for t in parts {
        if t.rank() != first.rank() || t.shape()[0] != n || &t.shape()[2..] != rest {
            return Err(Error::shape(format!(
                "channel_concat shape mismatch: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        total_c += t.shape()[1];
    }
    let mut out = Vec::with_capacity(n * total_c * inner);
    for ni in 0..n {
        for t in parts {
            let block = t.shape()[1] * inner;
            out.extend_from_slice(&t.data()[ni * block..][..block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total_c;
    Tensor::from_vec(&shape, out)
}

/// Channels `start..start + len` of a rank ≥ 2 tensor.
pub fn channel_slice<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.rank() < 2 || len == 0 || start + len > x.shape()[1] {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {:?}",
            start + len,
            x.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(n * len * inner);
    for ni in 0..n {
        out.extend_from_slice(&x.data()[(ni * c + start) * inner..][..len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    Tensor::from_vec(&shape, out)
}

/// Softmax over the last dimension.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let k = *x.shape().last().expect("tensor has rank >= 1");
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        out.extend(softmax_row(row).into_iter().map(T::cast));
    }
    Tensor::from_vec(x.shape(), out).expect("shape preserved")
}

pub(crate) fn softmax_row<T: Element>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.widen() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Log-softmax of one row, computed with the max subtracted.
pub(crate) fn log_softmax_row<T: Element>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.widen() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.widen() - lse).collect()
}

/// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, d_in] = x.dims2("linear input")?;
    let [d_out, w_in] = w.dims2("linear weight")?;
    if w_in != d_in {
        return Err(Error::shape(format!("linear weight {:?} cannot take input {:?}", w.shape(), x.shape())));
    }
    let mut out = vec![T::zero(); n * d_out];
    matmul(MatRef::new(x.data(), n, d_in), MatRef::t(w.data(), d_out, d_in), &mut out, false);
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(Error::shape(format!("linear bias must be [{d_out}], got {:?}", b.shape())));
        }
        for row in out.chunks_mut(d_out) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
    }
    Tensor::from_vec(&[n, d_out], out)
}

/// Input gradient of [`linear`]: `grad_out · w`.
pub fn linear_backward_input<T: Element>(grad_out: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, d_out] = grad_out.dims2("linear gradient")?;
    let [_, d_in] = w.dims2("linear weight")?;
    let mut dx = vec![T::zero(); n * d_in];
    matmul(MatRef::new(grad_out.data(), n, d_out), MatRef::new(w.data(), d_out, d_in), &mut dx, false);
    Tensor::from_vec(&[n, d_in], dx)
}

/// Weight gradient of [`linear`]: `grad_outᵀ · x`.
pub fn linear_backward_weight<T: Element>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, d_out] = grad_out.dims2("linear gradient")?;
    let [_, d_in] = x.dims2("linear input")?;
    let mut dw = vec![T::zero(); d_out * d_in];
    matmul(MatRef::t(grad_out.data(), n, d_out), MatRef::new(x.data(), n, d_in), &mut dw, false);
    Tensor::from_vec(&[d_out, d_in], dw)
}

/// Scales every `[h, w]` plane of `x: [N,C,H,W]` by `s[n, c]`.
pub fn channel_scale<T: Element>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("channel scale input")?;
    if s.shape() != [n, c] {
        return Err(Error::shape(format!("channel scales must be [{n}, {c}], got {:?}", s.shape())));
    }
    let p = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for (plane, &sv) in x.data().chunks(p).zip(s.data()) {
        out.extend(plane.iter().map(|&v| v * sv));
    }
    Tensor::from_vec(x.shape(), out)
}

/// Bilinear resampling of a single `h×w` plane to `oh×ow` with half-pixel
/// centers and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w);
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let at = |y: usize, x: usize| src[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

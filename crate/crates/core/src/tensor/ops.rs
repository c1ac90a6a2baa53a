//! Pure forward and gradient kernels.
//!
//! Everything here is a plain function of tensors, so the inference path pays
//! no tape overhead. The tape in [`super::tape`] wraps these same kernels to
//! register backward rules. Convolution uses im2col plus GEMM with the batch
//! dimension fanned out through [`crate::parallel`]; each batch item writes a
//! disjoint output slice, so results do not depend on thread count.

use super::{dims2, dims4, Real, Tensor};
use crate::error::{Error, Result};
use crate::parallel;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Convolution hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvSpec { stride, padding, dilation, groups }
    }

    /// Output spatial size for one axis, or None when the kernel does not fit.
    fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let eff = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if eff > padded {
            return None;
        }
        Some((padded - eff) / self.stride + 1)
    }
}

/// Shape of the conv2d output for the given input/weight shapes.
pub fn conv2d_out_shape(x: &[usize], w: &[usize], spec: &ConvSpec) -> Result<[usize; 4]> {
    let (n, c_in, h, wd) = dims4(x, "conv2d input")?;
    let (c_out, c_in_g, kh, kw) = dims4(w, "conv2d weight")?;
    if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::shape(format!(
            "channel counts ({c_in} in, {c_out} out) not divisible by groups {}",
            spec.groups
        )));
    }
    if c_in_g != c_in / spec.groups {
        return Err(Error::shape(format!(
            "weight expects {c_in_g} input channels per group, input supplies {}",
            c_in / spec.groups
        )));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::shape("stride and dilation must be positive"));
    }
    let oh = spec
        .out_extent(h, kh)
        .ok_or_else(|| Error::shape(format!("kernel {kh}x{kw} does not fit {h}x{wd} input with padding {}", spec.padding)))?;
    let ow = spec
        .out_extent(wd, kw)
        .ok_or_else(|| Error::shape(format!("kernel {kh}x{kw} does not fit {h}x{wd} input with padding {}", spec.padding)))?;
    Ok([n, c_out, oh, ow])
}

/// Expand one image (C,H,W) into columns of patch rows: [C*kh*kw, oh*ow].
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let pix = oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * pix);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * pix..((ci * kh + ky) * kw + kx + 1) * pix];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image; inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let pix = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * pix..((ci * kh + ky) * kw + kx + 1) * pix];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation of NCHW input with OIHW weights.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let [n, c_out, oh, ow] = conv2d_out_shape(x.shape(), w.shape(), spec)?;
    let (_, c_in, h, wd) = dims4(x.shape(), "conv2d input")?;
    let (_, c_in_g, kh, kw) = dims4(w.shape(), "conv2d weight")?;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(format!("conv2d bias shape {:?}, want [{c_out}]", b.shape())));
        }
    }
    let groups = spec.groups;
    let c_out_g = c_out / groups;
    let pix = oh * ow;
    let k = c_in_g * kh * kw;

    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    let xd = x.data();
    let wd_ = w.data();
    let per_image = c_out * pix;
    parallel::for_each_chunk_mut(out.data_mut(), per_image, |b, out_img| {
        let img = &xd[b * c_in * h * wd..(b + 1) * c_in * h * wd];
        let mut cols = vec![T::zero(); c_in * kh * kw * pix];
        im2col(img, c_in, h, wd, kh, kw, spec, oh, ow, &mut cols);
        for g in 0..groups {
            let wg = &wd_[g * c_out_g * k..(g + 1) * c_out_g * k];
            let cg = &cols[g * k * pix..(g + 1) * k * pix];
            let og = &mut out_img[g * c_out_g * pix..(g + 1) * c_out_g * pix];
            T::gemm(c_out_g, k, pix, T::one(), wg, cg, T::zero(), og);
        }
    });
    if let Some(b) = bias {
        let bd = b.data();
        for img in out.data_mut().chunks_mut(per_image) {
            for (o, plane) in img.chunks_mut(pix).enumerate() {
                let bv = bd[o];
                for v in plane.iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of conv2d with respect to its input.
pub fn conv2d_grad_input<T: Real>(
    x_shape: &[usize],
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, c_in, h, wd) = dims4(x_shape, "conv2d input")?;
    let (c_out, c_in_g, kh, kw) = dims4(w.shape(), "conv2d weight")?;
    let groups = spec.groups;
    let c_out_g = c_out / groups;
    let (_, _, oh, ow) = dims4(grad_out.shape(), "conv2d grad")?;
    let pix = oh * ow;
    let k = c_in_g * kh * kw;

    let mut gx = Tensor::zeros(&[n, c_in, h, wd]);
    let gd = grad_out.data();
    let wd_ = w.data();
    let per_image = c_in * h * wd;
    parallel::for_each_chunk_mut(gx.data_mut(), per_image, |b, gx_img| {
        let g_img = &gd[b * c_out * pix..(b + 1) * c_out * pix];
        let mut cols = vec![T::zero(); c_in * kh * kw * pix];
        for g in 0..groups {
            let wg = &wd_[g * c_out_g * k..(g + 1) * c_out_g * k];
            let gg = &g_img[g * c_out_g * pix..(g + 1) * c_out_g * pix];
            let cg = &mut cols[g * k * pix..(g + 1) * k * pix];
            // cols_g[K, P] = Wg^T[K, Og] * g[Og, P]
            T::gemm_strided(
                k, c_out_g, pix,
                T::one(),
                wg, 1, k as isize,
                gg, pix as isize, 1,
                T::zero(),
                cg,
            );
        }
        col2im(&cols, c_in, h, wd, kh, kw, spec, oh, ow, gx_img);
    });
    Ok(gx)
}

/// Gradient of conv2d with respect to its weights.
pub fn conv2d_grad_weight<T: Real>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    w_shape: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, c_in, h, wd) = dims4(x.shape(), "conv2d input")?;
    let (c_out, c_in_g, kh, kw) = dims4(w_shape, "conv2d weight")?;
    let groups = spec.groups;
    let c_out_g = c_out / groups;
    let (_, _, oh, ow) = dims4(grad_out.shape(), "conv2d grad")?;
    let pix = oh * ow;
    let k = c_in_g * kh * kw;
    let xd = x.data();
    let gd = grad_out.data();

    // Per-image partials computed in parallel, reduced in batch order so the
    // result is identical at any thread count.
    let partials = parallel::map_collect(n, |b| {
        let img = &xd[b * c_in * h * wd..(b + 1) * c_in * h * wd];
        let g_img = &gd[b * c_out * pix..(b + 1) * c_out * pix];
        let mut cols = vec![T::zero(); c_in * kh * kw * pix];
        im2col(img, c_in, h, wd, kh, kw, spec, oh, ow, &mut cols);
        let mut gw = vec![T::zero(); c_out * k];
        for g in 0..groups {
            let gg = &g_img[g * c_out_g * pix..(g + 1) * c_out_g * pix];
            let cg = &cols[g * k * pix..(g + 1) * k * pix];
            let gwg = &mut gw[g * c_out_g * k..(g + 1) * c_out_g * k];
            // gW[Og, K] = g[Og, P] * cols^T[P, K]
            T::gemm_strided(
                c_out_g, pix, k,
                T::one(),
                gg, pix as isize, 1,
                cg, 1, pix as isize,
                T::zero(),
                gwg,
            );
        }
        gw
    });
    let mut acc = vec![T::zero(); c_out * k];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    Tensor::new(w_shape, acc)
}

/// Gradient of conv2d with respect to its bias.
pub fn conv2d_grad_bias<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c_out, oh, ow) = dims4(grad_out.shape(), "conv2d grad")?;
    let pix = oh * ow;
    let mut gb = vec![T::zero(); c_out];
    let gd = grad_out.data();
    for b in 0..n {
        for (o, gbo) in gb.iter_mut().enumerate() {
            let plane = &gd[(b * c_out + o) * pix..(b * c_out + o + 1) * pix];
            *gbo += plane.iter().copied().sum();
        }
    }
    Tensor::new(&[c_out], gb)
}

/// Affine map of a batch of row vectors: [B,F] x [F,U] + [U].
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (b, f) = dims2(x.shape(), "dense input")?;
    let (fw, u) = dims2(w.shape(), "dense weight")?;
    if f != fw {
        return Err(Error::shape(format!("dense inner dims differ: input {f}, weight {fw}")));
    }
    if let Some(bt) = bias {
        if bt.shape() != [u] {
            return Err(Error::shape(format!("dense bias shape {:?}, want [{u}]", bt.shape())));
        }
    }
    let mut out = Tensor::zeros(&[b, u]);
    T::gemm(b, f, u, T::one(), x.data(), w.data(), T::zero(), out.data_mut());
    if let Some(bt) = bias {
        let bd = bt.data();
        for row in out.data_mut().chunks_mut(u) {
            for (v, &bv) in row.iter_mut().zip(bd) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

pub fn dense_grad_input<T: Real>(grad_out: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, u) = dims2(grad_out.shape(), "dense grad")?;
    let (f, _) = dims2(w.shape(), "dense weight")?;
    let mut gx = Tensor::zeros(&[b, f]);
    // gX[B,F] = g[B,U] * W^T[U,F]
    T::gemm_strided(b, u, f, T::one(), grad_out.data(), u as isize, 1, w.data(), 1, u as isize, T::zero(), gx.data_mut());
    Ok(gx)
}

pub fn dense_grad_weight<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, f) = dims2(x.shape(), "dense input")?;
    let (_, u) = dims2(grad_out.shape(), "dense grad")?;
    let mut gw = Tensor::zeros(&[f, u]);
    // gW[F,U] = X^T[F,B] * g[B,U]
    T::gemm_strided(f, b, u, T::one(), x.data(), 1, f as isize, grad_out.data(), u as isize, 1, T::zero(), gw.data_mut());
    Ok(gw)
}

pub fn dense_grad_bias<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, u) = dims2(grad_out.shape(), "dense grad")?;
    let mut gb = vec![T::zero(); u];
    for row in 0..b {
        for (gbo, &g) in gb.iter_mut().zip(&grad_out.data()[row * u..(row + 1) * u]) {
            *gbo += g;
        }
    }
    Tensor::new(&[u], gb)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Upstream gradient masked by the ReLU activation pattern.
pub fn relu_grad<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
        .expect("relu grad shape")
}

/// Max pooling; returns the pooled tensor and the flat argmax per output slot.
pub fn max_pool2d<T: Real>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = dims4(x.shape(), "max_pool2d input")?;
    let spec = ConvSpec::new(stride, padding, 1, 1);
    let oh = spec
        .out_extent(h, kernel)
        .ok_or_else(|| Error::shape(format!("pool window {kernel} does not fit {h}x{w}")))?;
    let ow = spec.out_extent(w, kernel).unwrap();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..n * c {
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                od[bc * oh * ow + oy * ow + ox] = best;
                argmax[bc * oh * ow + oy * ow + ox] = bc * h * w + best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d_grad<T: Real>(x_shape: &[usize], grad_out: &Tensor<T>, argmax: &[usize]) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape);
    let gd = gx.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        gd[idx] += g;
    }
    gx
}

/// Average pooling; padded positions are excluded from the divisor.
pub fn avg_pool2d<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x.shape(), "avg_pool2d input")?;
    let spec = ConvSpec::new(stride, padding, 1, 1);
    let oh = spec
        .out_extent(h, kernel)
        .ok_or_else(|| Error::shape(format!("pool window {kernel} does not fit {h}x{w}")))?;
    let ow = spec.out_extent(w, kernel).unwrap();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..n * c {
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = T::zero();
                let mut count = 0usize;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        sum += plane[iy as usize * w + ix as usize];
                        count += 1;
                    }
                }
                od[bc * oh * ow + oy * ow + ox] = sum / T::from_f64(count as f64);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_grad<T: Real>(
    x_shape: &[usize],
    grad_out: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (_, _, h, w) = dims4(x_shape, "avg_pool2d input").unwrap();
    let (_, _, oh, ow) = dims4(grad_out.shape(), "avg_pool2d grad").unwrap();
    let mut gx = Tensor::zeros(x_shape);
    let gd = gx.data_mut();
    let god = grad_out.data();
    let planes = x_shape[0] * x_shape[1];
    for bc in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut count = 0usize;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            count += 1;
                        }
                    }
                }
                let share = god[bc * oh * ow + oy * ow + ox] / T::from_f64(count as f64);
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            gd[bc * h * w + iy as usize * w + ix as usize] += share;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Mean over the spatial dims: NCHW -> [N, C].
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x.shape(), "global_avg_pool input")?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let mut out = Tensor::zeros(&[n, c]);
    let od = out.data_mut();
    for (bc, plane) in x.data().chunks(h * w).enumerate() {
        od[bc] = plane.iter().copied().sum::<T>() * inv;
    }
    debug_assert_eq!(od.len(), n * c);
    Ok(out)
}

pub fn global_avg_pool_grad<T: Real>(x_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = dims4(x_shape, "global_avg_pool input").unwrap();
    let inv = T::one() / T::from_f64((h * w) as f64);
    let mut gx = Tensor::zeros(x_shape);
    for (bc, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let g = grad_out.data()[bc] * inv;
        for v in plane.iter_mut() {
            *v = g;
        }
    }
    gx
}

/// Row-wise softmax over the last axis of a [B, C] tensor.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = dims2(logits.shape(), "softmax input")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood with max-subtraction stabilization.
/// Returns (loss, softmax probabilities) so the backward rule can reuse them.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, c) = dims2(logits.shape(), "cross entropy logits")?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::data(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (row, &y) in probs.data().chunks(c).zip(labels) {
        // ln of a stabilized softmax probability; row[y] > 0 by construction
        loss -= row[y].max(T::from_f64(1e-300)).ln();
    }
    Ok((loss / T::from_f64(b as f64), probs))
}

/// Gradient of the mean cross entropy with respect to the logits.
pub fn softmax_cross_entropy_grad<T: Real>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Tensor<T> {
    let c = probs.shape()[1];
    let b = probs.shape()[0];
    let scale = upstream / T::from_f64(b as f64);
    let mut g = probs.clone();
    for (row, &y) in g.data_mut().chunks_mut(c).zip(labels) {
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    g
}

/// Per-channel batch statistics of an NCHW tensor: (mean, biased variance).
pub fn batch_stats<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dims4(x.shape(), "batch_stats input")?;
    if n == 0 {
        return Err(Error::data("batch statistics of an empty batch"));
    }
    let m = T::from_f64((n * h * w) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let xd = x.data();
    for b in 0..n {
        for ci in 0..c {
            let plane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            mean[ci] += plane.iter().copied().sum::<T>();
        }
    }
    for v in mean.iter_mut() {
        *v = *v / m;
    }
    for b in 0..n {
        for ci in 0..c {
            let plane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            let mu = mean[ci];
            var[ci] += plane.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>();
        }
    }
    for v in var.iter_mut() {
        *v = *v / m;
    }
    Ok((Tensor::new(&[c], mean)?, Tensor::new(&[c], var)?))
}

/// Mean over N,H,W per channel: NCHW -> [C].
pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (mean, _) = batch_stats(x)?;
    Ok(mean)
}

pub fn channel_mean_grad<T: Real>(x_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x_shape, "channel_mean input").unwrap();
    let inv = T::one() / T::from_f64((n * h * w) as f64);
    let mut gx = Tensor::zeros(x_shape);
    for (bc, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let g = grad_out.data()[bc % c] * inv;
        for v in plane.iter_mut() {
            *v = g;
        }
    }
    gx
}

/// Biased variance over N,H,W per channel: NCHW -> [C].
pub fn channel_var<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, var) = batch_stats(x)?;
    Ok(var)
}

/// Gradient of the biased per-channel variance. The mean's own dependence on
/// x cancels, leaving d var_c / d x_i = 2 (x_i - mu_c) / m.
pub fn channel_var_grad<T: Real>(x: &Tensor<T>, mean: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape(), "channel_var input").unwrap();
    let scale = T::from_f64(2.0 / (n * h * w) as f64);
    let mut gx = Tensor::zeros(x.shape());
    let xd = x.data();
    for (bc, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let ci = bc % c;
        let g = grad_out.data()[ci] * scale;
        let mu = mean.data()[ci];
        for (v, &xv) in plane.iter_mut().zip(&xd[bc * h * w..(bc + 1) * h * w]) {
            *v = g * (xv - mu);
        }
    }
    gx
}

/// Scale along the leading axis: y[o, ...] = x[o, ...] * s[o].
pub fn scale_axis0<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let o = *x
        .shape()
        .first()
        .ok_or_else(|| Error::shape("scale_axis0 needs a leading axis"))?;
    if s.shape() != [o] {
        return Err(Error::shape(format!("scale vector {:?}, want [{o}]", s.shape())));
    }
    let inner = x.numel() / o.max(1);
    let mut out = x.clone();
    for (oi, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let sv = s.data()[oi];
        for v in chunk.iter_mut() {
            *v = *v * sv;
        }
    }
    Ok(out)
}

/// Normalize with explicit per-channel statistics: gamma*(x-mean)/sqrt(var+eps)+beta.
pub fn batch_norm_apply<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x.shape(), "batch_norm input")?;
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")] {
        if t.shape() != [c] {
            return Err(Error::shape(format!("batch_norm {name} shape {:?}, want [{c}]", t.shape())));
        }
    }
    let mut out = x.clone();
    let (gd, bd, md, vd) = (gamma.data(), beta.data(), mean.data(), var.data());
    for bc in 0..n * c {
        let ci = bc % c;
        let scale = gd[ci] / (vd[ci] + eps).sqrt();
        let shift = bd[ci] - md[ci] * scale;
        for v in out.data_mut()[bc * h * w..(bc + 1) * h * w].iter_mut() {
            *v = *v * scale + shift;
        }
    }
    Ok(out)
}

/// Gradients of train-mode batch norm (statistics from the batch itself).
/// Returns (grad_x, grad_gamma, grad_beta).
pub fn batch_norm_grad<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dims4(x.shape(), "batch_norm input")?;
    let m = T::from_f64((n * h * w) as f64);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    let xd = x.data();
    let gd = grad_out.data();
    for bc in 0..n * c {
        let ci = bc % c;
        let inv_std = T::one() / (var.data()[ci] + eps).sqrt();
        let mu = mean.data()[ci];
        for i in bc * h * w..(bc + 1) * h * w {
            let xhat = (xd[i] - mu) * inv_std;
            gg[ci] += gd[i] * xhat;
            gb[ci] += gd[i];
            sum_g[ci] += gd[i];
            sum_gx[ci] += gd[i] * xhat;
        }
    }
    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    for bc in 0..n * c {
        let ci = bc % c;
        let inv_std = T::one() / (var.data()[ci] + eps).sqrt();
        let mu = mean.data()[ci];
        let k = gamma.data()[ci] * inv_std;
        for i in bc * h * w..(bc + 1) * h * w {
            let xhat = (xd[i] - mu) * inv_std;
            gxd[i] = k * (gd[i] - sum_g[ci] / m - xhat * sum_gx[ci] / m);
        }
    }
    Ok((gx, Tensor::new(&[c], gg)?, Tensor::new(&[c], gb)?))
}

/// Inverted dropout: active only in train mode, scaled by 1/(1-p).
/// Returns the output and the applied mask (already scaled).
pub fn dropout<T: Real, R: Rng>(x: &Tensor<T>, p: f64, train: bool, rng: &mut R) -> (Tensor<T>, Option<Tensor<T>>) {
    if !train || p == 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - p;
    let scale = T::from_f64(1.0 / keep);
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
        .collect();
    let mask = Tensor::new(x.shape(), mask).unwrap();
    (x.mul(&mask).unwrap(), Some(mask))
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::shape("concat of zero tensors"));
    }
    let (n, _, h, w) = dims4(xs[0].shape(), "concat input")?;
    let mut c_total = 0;
    for x in xs {
        let (ni, ci, hi, wi) = dims4(x.shape(), "concat input")?;
        if ni != n || hi != h || wi != w {
            return Err(Error::shape(format!(
                "concat mismatch: {:?} vs {:?}",
                xs[0].shape(),
                x.shape()
            )));
        }
        c_total += ci;
    }
    let mut out = Tensor::zeros(&[n, c_total, h, w]);
    let hw = h * w;
    let od = out.data_mut();
    for b in 0..n {
        let mut c_off = 0;
        for x in xs {
            let ci = x.shape()[1];
            let src = &x.data()[b * ci * hw..(b + 1) * ci * hw];
            od[(b * c_total + c_off) * hw..(b * c_total + c_off + ci) * hw].copy_from_slice(src);
            c_off += ci;
        }
    }
    Ok(out)
}

/// Slice a channel range out of the grad of a channel concat.
pub fn slice_channels<T: Real>(x: &Tensor<T>, from: usize, count: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x.shape(), "slice input")?;
    if from + count > c {
        return Err(Error::shape(format!("channel slice {from}+{count} exceeds {c}")));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, count, h, w]);
    let od = out.data_mut();
    for b in 0..n {
        let src = &x.data()[(b * c + from) * hw..(b * c + from + count) * hw];
        od[b * count * hw..(b + 1) * count * hw].copy_from_slice(src);
    }
    Ok(out)
}

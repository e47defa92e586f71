//! Forward and backward compute kernels.
//!
//! All kernels are pure functions from tensors to tensors. Convolution is
//! cross-correlation (no kernel flip). Every kernel fixes the accumulation
//! order of each output element independently of how work is split across
//! threads, so results are bitwise deterministic for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor, IGNORE_LABEL};

/// Convolution parameters: weight `(co, ci, kh, kw)`, optional bias, stride
/// and padding per spatial axis.
///
/// The same parameter set drives both `conv2d` (maps `ci -> co` channels) and
/// `transposed_conv2d` (the adjoint map, `co -> ci`). For `conv2d` the bias
/// has length `co`; for `transposed_conv2d` it has length `ci`.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: (usize, usize), pad: (usize, usize)) -> Result<Self> {
        let k = weight.shape();
        if k.h < 1 || k.w < 1 {
            return Err(Error::InvalidArg(format!("kernel dims must be >= 1, got {}x{}", k.h, k.w)));
        }
        if stride.0 < 1 || stride.1 < 1 {
            return Err(Error::InvalidArg(format!("stride must be >= 1, got {:?}", stride)));
        }
        if let Some(b) = &bias {
            let bs = b.shape();
            if (bs.n, bs.h, bs.w) != (1, 1, 1) {
                return Err(Error::shape("conv_params", format!("bias must be (1, c, 1, 1), got {}", bs)));
            }
        }
        Ok(ConvParams { weight, bias, stride, pad })
    }

    /// Output channels of the forward (conv) view.
    pub fn co(&self) -> usize {
        self.weight.shape().n
    }

    /// Input channels of the forward (conv) view.
    pub fn ci(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output spatial size of a transposed convolution along one axis:
/// `(input - 1) * stride - 2 * pad + k`.
pub fn deconv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (input - 1) * stride + k;
    if grown < 2 * pad + 1 {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Run `f(plane_index, plane)` over consecutive `plane_len` chunks of `out`,
/// in parallel when the total work is worth it. Each plane is written by
/// exactly one invocation, so the split never changes results.
fn for_each_plane<F>(out: &mut [f32], plane_len: usize, work_per_plane: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let planes = out.len() / plane_len.max(1);
    if planes > 1 && work_per_plane.saturating_mul(planes) > 16_384 && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(i, plane)| f(i, plane));
    } else {
        for (i, plane) in out.chunks_mut(plane_len).enumerate() {
            f(i, plane);
        }
    }
}

/// Valid output-index range `[lo, hi)` such that `o * stride + off` lands in
/// `[0, limit)` for every `o` in the range, clamped to `[0, out_len)`.
#[inline]
fn valid_range(out_len: usize, stride: usize, off: isize, limit: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let last = limit as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize) / stride + 1;
    (lo.min(out_len), hi.min(out_len))
}

fn check_finite(op: &'static str, t: &Tensor) {
    debug_assert!(t.all_finite(), "{op}: non-finite values in output");
    let _ = (op, t);
}

/// 2-D cross-correlation.
///
/// `out[n, co, oh, ow] = bias[co] + sum x[n, ci, oh*sh - ph + kh, ow*sw - pw + kw] * w[co, ci, kh, kw]`
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let xs = x.shape();
    let ks = p.weight.shape();
    if xs.c != ks.c {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {} != kernel input channels {}", xs.c, ks.c),
        ));
    }
    if let Some(b) = &p.bias {
        if b.shape().c != ks.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != output channels {}", b.shape().c, ks.n),
            ));
        }
    }
    let (sh, sw) = p.stride;
    let (ph, pw) = p.pad;
    let oh = conv_out_dim(xs.h, ks.h, sh, ph).ok_or_else(|| {
        Error::shape("conv2d", format!("kernel height {} exceeds padded input height {}", ks.h, xs.h + 2 * ph))
    })?;
    let ow = conv_out_dim(xs.w, ks.w, sw, pw).ok_or_else(|| {
        Error::shape("conv2d", format!("kernel width {} exceeds padded input width {}", ks.w, xs.w + 2 * pw))
    })?;

    let out_shape = Shape::new(xs.n, ks.n, oh, ow);
    let mut out = vec![0.0f32; out_shape.numel()];
    let xd = x.data();
    let wd = p.weight.data();
    let bias = p.bias.as_ref().map(|b| b.data());
    let co_n = ks.n;

    let plane = oh * ow;
    let work = plane * ks.c * ks.h * ks.w;
    for_each_plane(&mut out, plane, work, |pi, out_plane| {
        let n = pi / co_n;
        let co = pi % co_n;
        if let Some(b) = bias {
            out_plane.fill(b[co]);
        }
        for ci in 0..ks.c {
            for kh in 0..ks.h {
                for kw in 0..ks.w {
                    let wv = wd[((co * ks.c + ci) * ks.h + kh) * ks.w + kw];
                    let iw0 = kw as isize - pw as isize;
                    let (lo, hi) = valid_range(ow, sw, iw0, xs.w);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * sh + kh) as isize - ph as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let x_row = &xd[xs.idx(n, ci, iy as usize, 0)..][..xs.w];
                        let out_row = &mut out_plane[oy * ow..][..ow];
                        if sw == 1 {
                            let base = (lo as isize + iw0) as usize;
                            let src = &x_row[base..base + (hi - lo)];
                            for (o, s) in out_row[lo..hi].iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        } else {
                            for o in lo..hi {
                                let ix = (o * sw) as isize + iw0;
                                out_row[o] += wv * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });

    let t = Tensor::from_vec(out_shape, out)?;
    check_finite("conv2d", &t);
    Ok(t)
}

/// Gradient of `conv2d` w.r.t. its input; equivalently the linear part of
/// `transposed_conv2d`. `target` is the spatial size of the produced tensor.
///
/// `bias_on_output`, when given, must have length equal to the weight's `ci`
/// axis (the transposed view's output channels).
pub fn conv2d_input_grad(
    gout: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    target: (usize, usize),
    bias_on_output: Option<&[f32]>,
) -> Result<Tensor> {
    let gs = gout.shape();
    let ks = weight.shape();
    if gs.c != ks.n {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("input channels {} != kernel output channels {}", gs.c, ks.n),
        ));
    }
    if let Some(b) = bias_on_output {
        if b.len() != ks.c {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("bias length {} != output channels {}", b.len(), ks.c),
            ));
        }
    }
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let (th, tw) = target;
    let out_shape = Shape::new(gs.n, ks.c, th, tw);
    let mut out = vec![0.0f32; out_shape.numel()];
    let gd = gout.data();
    let wd = weight.data();
    let ci_n = ks.c;

    let plane = th * tw;
    let work = gs.h * gs.w * ks.n * ks.h * ks.w;
    for_each_plane(&mut out, plane, work, |pi, out_plane| {
        let n = pi / ci_n;
        let ci = pi % ci_n;
        if let Some(b) = bias_on_output {
            out_plane.fill(b[ci]);
        }
        for co in 0..ks.n {
            for kh in 0..ks.h {
                for kw in 0..ks.w {
                    let wv = wd[((co * ks.c + ci) * ks.h + kh) * ks.w + kw];
                    let iw0 = kw as isize - pw as isize;
                    let (lo, hi) = valid_range(gs.w, sw, iw0, tw);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..gs.h {
                        let iy = (oy * sh + kh) as isize - ph as isize;
                        if iy < 0 || iy >= th as isize {
                            continue;
                        }
                        let g_row = &gd[gs.idx(n, co, oy, 0)..][..gs.w];
                        let out_row = &mut out_plane[iy as usize * tw..][..tw];
                        if sw == 1 {
                            let base = (lo as isize + iw0) as usize;
                            let dst = &mut out_row[base..base + (hi - lo)];
                            for (o, g) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                *o += wv * g;
                            }
                        } else {
                            for o in lo..hi {
                                let ix = (o * sw) as isize + iw0;
                                out_row[ix as usize] += wv * g_row[o];
                            }
                        }
                    }
                }
            }
        }
    });

    Tensor::from_vec(out_shape, out)
}

/// Transposed convolution (deconvolution): the exact adjoint of [`conv2d`]
/// with shared weights. Input has `co` channels, output has `ci` channels.
pub fn transposed_conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let xs = x.shape();
    let ks = p.weight.shape();
    let (sh, sw) = p.stride;
    let (ph, pw) = p.pad;
    let th = deconv_out_dim(xs.h, ks.h, sh, ph)
        .ok_or_else(|| Error::shape("transposed_conv2d", format!("output height would be <= 0 for input height {}", xs.h)))?;
    let tw = deconv_out_dim(xs.w, ks.w, sw, pw)
        .ok_or_else(|| Error::shape("transposed_conv2d", format!("output width would be <= 0 for input width {}", xs.w)))?;
    let bias = p.bias.as_ref().map(|b| b.data());
    let t = conv2d_input_grad(x, &p.weight, p.stride, p.pad, (th, tw), bias)?;
    check_finite("transposed_conv2d", &t);
    Ok(t)
}

/// Gradient of `conv2d` w.r.t. its weight, also used (with roles swapped)
/// for the transposed convolution's weight gradient.
///
/// `gout` is indexed by the weight's `co` axis, `x` by its `ci` axis:
/// `gw[co, ci, kh, kw] = sum_{n, oh, ow} gout[n, co, oh, ow] * x[n, ci, oh*sh - ph + kh, ow*sw - pw + kw]`.
pub fn conv2d_weight_grad(
    gout: &Tensor,
    x: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    kernel: (usize, usize),
) -> Result<Tensor> {
    let gs = gout.shape();
    let xs = x.shape();
    let (kh_n, kw_n) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let gw_shape = Shape::new(gs.c, xs.c, kh_n, kw_n);
    let mut gw = vec![0.0f32; gw_shape.numel()];
    let gd = gout.data();
    let xd = x.data();

    let plane = xs.c * kh_n * kw_n;
    let work = gs.n * gs.h * gs.w * plane;
    for_each_plane(&mut gw, plane, work, |co, gw_plane| {
        for ci in 0..xs.c {
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    let iw0 = kw as isize - pw as isize;
                    let (lo, hi) = valid_range(gs.w, sw, iw0, xs.w);
                    let mut acc = 0.0f32;
                    if lo < hi {
                        for n in 0..gs.n {
                            for oy in 0..gs.h {
                                let iy = (oy * sh + kh) as isize - ph as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                let g_row = &gd[gs.idx(n, co, oy, 0)..][..gs.w];
                                let x_row = &xd[xs.idx(n, ci, iy as usize, 0)..][..xs.w];
                                if sw == 1 {
                                    let base = (lo as isize + iw0) as usize;
                                    for (g, xv) in g_row[lo..hi].iter().zip(&x_row[base..base + (hi - lo)]) {
                                        acc += g * xv;
                                    }
                                } else {
                                    for o in lo..hi {
                                        let ix = (o * sw) as isize + iw0;
                                        acc += g_row[o] * x_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                    gw_plane[(ci * kh_n + kh) * kw_n + kw] = acc;
                }
            }
        }
    });

    Tensor::from_vec(gw_shape, gw)
}

/// Bias gradient: per-channel sum of `gout`.
pub fn bias_grad(gout: &Tensor) -> Tensor {
    let gs = gout.shape();
    let gd = gout.data();
    let mut gb = vec![0.0f32; gs.c];
    for n in 0..gs.n {
        for c in 0..gs.c {
            let mut acc = 0.0f32;
            let base = gs.idx(n, c, 0, 0);
            for v in &gd[base..base + gs.h * gs.w] {
                acc += v;
            }
            gb[c] += acc;
        }
    }
    Tensor::from_vec((1, gs.c, 1, 1), gb).expect("bias grad shape")
}

/// Max-pool output plus the flat per-plane argmax of every window (first
/// index in row-major order on ties). Padding is implicit `-inf`.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<u32>)> {
    if k < 1 || stride < 1 {
        return Err(Error::InvalidArg(format!("max_pool2d: k and stride must be >= 1, got k={k} stride={stride}")));
    }
    if pad >= k {
        return Err(Error::InvalidArg(format!("max_pool2d: pad {pad} must be < window {k}")));
    }
    let xs = x.shape();
    let oh = conv_out_dim(xs.h, k, stride, pad)
        .ok_or_else(|| Error::shape("max_pool2d", format!("window {k} larger than padded input height {}", xs.h + 2 * pad)))?;
    let ow = conv_out_dim(xs.w, k, stride, pad)
        .ok_or_else(|| Error::shape("max_pool2d", format!("window {k} larger than padded input width {}", xs.w + 2 * pad)))?;
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![0.0f32; out_shape.numel()];
    let mut arg = vec![0u32; out_shape.numel()];
    let xd = x.data();

    for pi in 0..xs.n * xs.c {
        let n = pi / xs.c;
        let c = pi % xs.c;
        let x_plane = &xd[xs.idx(n, c, 0, 0)..][..xs.h * xs.w];
        let out_base = pi * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0u32;
                let mut found = false;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= xs.w as isize {
                            continue;
                        }
                        let v = x_plane[iy as usize * xs.w + ix as usize];
                        if !found || v > best {
                            best = v;
                            best_idx = (iy as usize * xs.w + ix as usize) as u32;
                            found = true;
                        }
                    }
                }
                debug_assert!(found, "max_pool2d window entirely in padding");
                out[out_base + oy * ow + ox] = best;
                arg[out_base + oy * ow + ox] = best_idx;
            }
        }
    }

    Ok((Tensor::from_vec(out_shape, out)?, arg))
}

/// Routes `gout` back to the recorded argmax locations.
pub fn max_pool2d_backward(gout: &Tensor, argmax: &[u32], x_shape: Shape) -> Tensor {
    let gs = gout.shape();
    let mut gx = vec![0.0f32; x_shape.numel()];
    let gd = gout.data();
    let plane_in = x_shape.h * x_shape.w;
    let plane_out = gs.h * gs.w;
    for pi in 0..gs.n * gs.c {
        let gx_plane = &mut gx[pi * plane_in..][..plane_in];
        let g_plane = &gd[pi * plane_out..][..plane_out];
        let a_plane = &argmax[pi * plane_out..][..plane_out];
        for (g, &a) in g_plane.iter().zip(a_plane) {
            gx_plane[a as usize] += g;
        }
    }
    Tensor::from_vec(x_shape, gx).expect("max_pool2d backward shape")
}

/// Elementwise `max(x, 0)`; never produces `-0.0`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// `gout` masked by `out > 0`.
pub fn relu_backward(gout: &Tensor, out: &Tensor) -> Tensor {
    let data: Vec<f32> = gout
        .data()
        .iter()
        .zip(out.data())
        .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(gout.shape(), data).expect("relu backward shape")
}

/// Elementwise sum; shapes must match exactly.
pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::shape("add", format!("shape {} != shape {}", x.shape(), y.shape())));
    }
    let data: Vec<f32> = x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Symmetric spatial padding with a constant value.
pub fn pad2d(x: &Tensor, ph: usize, pw: usize, value: f32) -> Tensor {
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, xs.h + 2 * ph, xs.w + 2 * pw);
    let mut out = vec![value; os.numel()];
    let xd = x.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                let src = &xd[xs.idx(n, c, y, 0)..][..xs.w];
                let dst = &mut out[os.idx(n, c, y + ph, pw)..][..xs.w];
                dst.copy_from_slice(src);
            }
        }
    }
    Tensor::from_vec(os, out).expect("pad2d shape")
}

/// Spatial crop starting at `(y0, x0)` with size `(h, w)`.
pub fn crop2d(x: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let xs = x.shape();
    if y0 + h > xs.h || x0 + w > xs.w {
        return Err(Error::shape(
            "crop2d",
            format!("crop ({y0}+{h}, {x0}+{w}) exceeds input {}x{}", xs.h, xs.w),
        ));
    }
    let os = Shape::new(xs.n, xs.c, h, w);
    let mut out = vec![0.0f32; os.numel()];
    let xd = x.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..h {
                let src = &xd[xs.idx(n, c, y0 + y, x0)..][..w];
                out[os.idx(n, c, y, 0)..][..w].copy_from_slice(src);
            }
        }
    }
    Tensor::from_vec(os, out)
}

/// Scatter a cropped gradient back into the uncropped shape.
pub fn crop2d_backward(gout: &Tensor, x_shape: Shape, y0: usize, x0: usize) -> Tensor {
    let gs = gout.shape();
    let mut gx = vec![0.0f32; x_shape.numel()];
    let gd = gout.data();
    for n in 0..gs.n {
        for c in 0..gs.c {
            for y in 0..gs.h {
                let src = &gd[gs.idx(n, c, y, 0)..][..gs.w];
                gx[x_shape.idx(n, c, y0 + y, x0)..][..gs.w].copy_from_slice(src);
            }
        }
    }
    Tensor::from_vec(x_shape, gx).expect("crop2d backward shape")
}

/// Bilinear resize with half-pixel centers. Resizing to the input size is
/// the exact identity.
pub fn resize_bilinear(x: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    let xs = x.shape();
    if h2 == 0 || w2 == 0 {
        return Err(Error::InvalidArg("resize_bilinear: target dims must be >= 1".into()));
    }
    let os = Shape::new(xs.n, xs.c, h2, w2);
    let mut out = vec![0.0f32; os.numel()];
    let xd = x.data();
    let coords_y = resize_coords(xs.h, h2);
    let coords_x = resize_coords(xs.w, w2);
    let plane = h2 * w2;
    for_each_plane(&mut out, plane, plane * 4, |pi, out_plane| {
        let base = pi * xs.h * xs.w;
        let x_plane = &xd[base..base + xs.h * xs.w];
        for y in 0..h2 {
            let (y0, y1, fy) = coords_y[y];
            for x2 in 0..w2 {
                let (x0, x1, fx) = coords_x[x2];
                let v00 = x_plane[y0 * xs.w + x0];
                let v01 = x_plane[y0 * xs.w + x1];
                let v10 = x_plane[y1 * xs.w + x0];
                let v11 = x_plane[y1 * xs.w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out_plane[y * w2 + x2] = top + (bot - top) * fy;
            }
        }
    });
    Tensor::from_vec(os, out)
}

/// Source index pair and interpolation weight for each target index.
fn resize_coords(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let s0 = (s.floor() as usize).min(src - 1);
            let s1 = (s0 + 1).min(src - 1);
            let f = (s - s0 as f64) as f32;
            (s0, s1, f)
        })
        .collect()
}

/// Adjoint of [`resize_bilinear`]: scatters each output gradient onto its
/// four source corners with the interpolation weights.
pub fn resize_bilinear_backward(gout: &Tensor, x_shape: Shape) -> Tensor {
    let gs = gout.shape();
    let mut gx = vec![0.0f32; x_shape.numel()];
    let gd = gout.data();
    let coords_y = resize_coords(x_shape.h, gs.h);
    let coords_x = resize_coords(x_shape.w, gs.w);
    let plane_in = x_shape.h * x_shape.w;
    let plane_out = gs.h * gs.w;
    for_each_plane(&mut gx, plane_in, plane_out * 4, |pi, gx_plane| {
        let g_plane = &gd[pi * plane_out..][..plane_out];
        for y in 0..gs.h {
            let (y0, y1, fy) = coords_y[y];
            for x2 in 0..gs.w {
                let (x0, x1, fx) = coords_x[x2];
                let g = g_plane[y * gs.w + x2];
                gx_plane[y0 * x_shape.w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gx_plane[y0 * x_shape.w + x1] += g * (1.0 - fy) * fx;
                gx_plane[y1 * x_shape.w + x0] += g * fy * (1.0 - fx);
                gx_plane[y1 * x_shape.w + x1] += g * fy * fx;
            }
        }
    });
    Tensor::from_vec(x_shape, gx).expect("resize backward shape")
}

/// Per-channel statistics produced by a training-mode batch norm pass.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    /// Biased variance (division by the full element count), the same value
    /// used for normalization.
    pub var: Vec<f32>,
}

/// Training-mode batch normalization over `(n, h, w)` per channel.
/// Statistics are accumulated in f64.
pub fn batch_norm2d_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<(Tensor, BnBatchStats)> {
    let xs = x.shape();
    check_bn_params("batch_norm2d", xs.c, gamma, beta)?;
    if eps <= 0.0 {
        return Err(Error::InvalidArg(format!("batch_norm2d: eps must be > 0, got {eps}")));
    }
    let m = (xs.n * xs.h * xs.w) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f32; xs.c];
    let mut var = vec![0.0f32; xs.c];
    for c in 0..xs.c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for n in 0..xs.n {
            let base = xs.idx(n, c, 0, 0);
            for &v in &xd[base..base + xs.h * xs.w] {
                let v = v as f64;
                sum += v;
                sq += v * v;
            }
        }
        let mu = sum / m;
        mean[c] = mu as f32;
        var[c] = ((sq / m - mu * mu).max(0.0)) as f32;
    }
    let y = bn_apply(x, &mean, &var, gamma.data(), beta.data(), eps);
    Ok((y, BnBatchStats { mean, var }))
}

/// Inference-mode batch normalization with provided statistics.
pub fn batch_norm2d_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let xs = x.shape();
    check_bn_params("batch_norm2d", xs.c, gamma, beta)?;
    if running_mean.len() != xs.c || running_var.len() != xs.c {
        return Err(Error::shape(
            "batch_norm2d",
            format!("running stats length {} != channels {}", running_mean.len(), xs.c),
        ));
    }
    Ok(bn_apply(x, running_mean, running_var, gamma.data(), beta.data(), eps))
}

fn check_bn_params(op: &'static str, c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape().c != c || beta.shape().c != c {
        return Err(Error::shape(
            op,
            format!("gamma/beta channels ({}, {}) != input channels {}", gamma.shape().c, beta.shape().c, c),
        ));
    }
    Ok(())
}

fn bn_apply(x: &Tensor, mean: &[f32], var: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Tensor {
    let xs = x.shape();
    let xd = x.data();
    let mut out = vec![0.0f32; xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let inv = 1.0 / (var[c] + eps).sqrt();
            let g = gamma[c] * inv;
            let b = beta[c] - mean[c] * g;
            let base = xs.idx(n, c, 0, 0);
            for (o, &v) in out[base..base + xs.h * xs.w].iter_mut().zip(&xd[base..base + xs.h * xs.w]) {
                *o = v * g + b;
            }
        }
    }
    Tensor::from_vec(xs, out).expect("bn shape")
}

/// Backward of training-mode batch norm. Returns `(gx, ggamma, gbeta)`.
pub fn batch_norm2d_train_backward(
    gout: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    stats: &BnBatchStats,
    eps: f32,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let m = (xs.n * xs.h * xs.w) as f64;
    let xd = x.data();
    let gd = gout.data();
    let gm = gamma.data();
    let mut gx = vec![0.0f32; xs.numel()];
    let mut ggamma = vec![0.0f32; xs.c];
    let mut gbeta = vec![0.0f32; xs.c];
    for c in 0..xs.c {
        let mean = stats.mean[c] as f64;
        let inv = 1.0 / ((stats.var[c] + eps) as f64).sqrt();
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for n in 0..xs.n {
            let base = xs.idx(n, c, 0, 0);
            for i in 0..xs.h * xs.w {
                let g = gd[base + i] as f64;
                let xhat = (xd[base + i] as f64 - mean) * inv;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        ggamma[c] = sum_gx as f32;
        gbeta[c] = sum_g as f32;
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        let scale = gm[c] as f64 * inv;
        for n in 0..xs.n {
            let base = xs.idx(n, c, 0, 0);
            for i in 0..xs.h * xs.w {
                let g = gd[base + i] as f64;
                let xhat = (xd[base + i] as f64 - mean) * inv;
                gx[base + i] = (scale * (g - mean_g - xhat * mean_gx)) as f32;
            }
        }
    }
    (
        Tensor::from_vec(xs, gx).expect("bn gx shape"),
        Tensor::from_vec((1, xs.c, 1, 1), ggamma).expect("bn ggamma shape"),
        Tensor::from_vec((1, xs.c, 1, 1), gbeta).expect("bn gbeta shape"),
    )
}

/// Backward of inference-mode batch norm. Returns `(gx, ggamma, gbeta)`.
pub fn batch_norm2d_eval_backward(
    gout: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let xd = x.data();
    let gd = gout.data();
    let gm = gamma.data();
    let mut gx = vec![0.0f32; xs.numel()];
    let mut ggamma = vec![0.0f32; xs.c];
    let mut gbeta = vec![0.0f32; xs.c];
    for c in 0..xs.c {
        let inv = 1.0 / (running_var[c] + eps).sqrt();
        let scale = gm[c] * inv;
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for n in 0..xs.n {
            let base = xs.idx(n, c, 0, 0);
            for i in 0..xs.h * xs.w {
                let g = gd[base + i];
                let xhat = (xd[base + i] - running_mean[c]) * inv;
                sum_g += g as f64;
                sum_gx += (g * xhat) as f64;
                gx[base + i] = g * scale;
            }
        }
        ggamma[c] = sum_gx as f32;
        gbeta[c] = sum_g as f32;
    }
    (
        Tensor::from_vec(xs, gx).expect("bn gx shape"),
        Tensor::from_vec((1, xs.c, 1, 1), ggamma).expect("bn ggamma shape"),
        Tensor::from_vec((1, xs.c, 1, 1), gbeta).expect("bn gbeta shape"),
    )
}

/// Mean per-pixel softmax cross-entropy over non-ignored pixels.
/// Returns `(loss, valid_pixel_count)`; log-sum-exp is max-shifted and the
/// total is accumulated in f64.
pub fn softmax_ce_loss(logits: &Tensor, labels: &[LabelMap], ignore: u8) -> Result<(f32, usize)> {
    let ls = logits.shape();
    if labels.len() != ls.n {
        return Err(Error::shape(
            "softmax_ce_loss",
            format!("batch {} != label maps {}", ls.n, labels.len()),
        ));
    }
    let k = ls.c;
    let ld = logits.data();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (n, lab) in labels.iter().enumerate() {
        if lab.h != ls.h || lab.w != ls.w {
            return Err(Error::shape(
                "softmax_ce_loss",
                format!("label map {}x{} != logits {}x{}", lab.h, lab.w, ls.h, ls.w),
            ));
        }
        for y in 0..ls.h {
            for x in 0..ls.w {
                let l = lab.at(y, x);
                if l == ignore {
                    continue;
                }
                if l as usize >= k {
                    return Err(Error::InvalidArg(format!(
                        "softmax_ce_loss: label {l} out of range for {k} classes at ({n}, {y}, {x})"
                    )));
                }
                let mut maxv = f32::NEG_INFINITY;
                for c in 0..k {
                    maxv = maxv.max(ld[ls.idx(n, c, y, x)]);
                }
                let mut sum = 0.0f64;
                for c in 0..k {
                    sum += ((ld[ls.idx(n, c, y, x)] - maxv) as f64).exp();
                }
                let lse = maxv as f64 + sum.ln();
                total += lse - ld[ls.idx(n, l as usize, y, x)] as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Numerical("empty loss support: every pixel carries the ignore label".into()));
    }
    Ok(((total / count as f64) as f32, count))
}

/// Gradient of [`softmax_ce_loss`] w.r.t. the logits, scaled by `gout`.
pub fn softmax_ce_loss_backward(
    logits: &Tensor,
    labels: &[LabelMap],
    ignore: u8,
    count: usize,
    gout: f32,
) -> Tensor {
    let ls = logits.shape();
    let k = ls.c;
    let ld = logits.data();
    let mut gx = vec![0.0f32; ls.numel()];
    let scale = gout / count as f32;
    for (n, lab) in labels.iter().enumerate() {
        for y in 0..ls.h {
            for x in 0..ls.w {
                let l = lab.at(y, x);
                if l == ignore {
                    continue;
                }
                let mut maxv = f32::NEG_INFINITY;
                for c in 0..k {
                    maxv = maxv.max(ld[ls.idx(n, c, y, x)]);
                }
                let mut sum = 0.0f64;
                for c in 0..k {
                    sum += ((ld[ls.idx(n, c, y, x)] - maxv) as f64).exp();
                }
                for c in 0..k {
                    let p = (((ld[ls.idx(n, c, y, x)] - maxv) as f64).exp() / sum) as f32;
                    let t = if c == l as usize { 1.0 } else { 0.0 };
                    gx[ls.idx(n, c, y, x)] = (p - t) * scale;
                }
            }
        }
    }
    Tensor::from_vec(ls, gx).expect("loss backward shape")
}

/// Stable softmax over the channel axis, per pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let xd = x.data();
    let mut out = vec![0.0f32; xs.numel()];
    for n in 0..xs.n {
        for y in 0..xs.h {
            for x2 in 0..xs.w {
                let mut maxv = f32::NEG_INFINITY;
                for c in 0..xs.c {
                    maxv = maxv.max(xd[xs.idx(n, c, y, x2)]);
                }
                let mut sum = 0.0f64;
                for c in 0..xs.c {
                    sum += ((xd[xs.idx(n, c, y, x2)] - maxv) as f64).exp();
                }
                for c in 0..xs.c {
                    out[xs.idx(n, c, y, x2)] = (((xd[xs.idx(n, c, y, x2)] - maxv) as f64).exp() / sum) as f32;
                }
            }
        }
    }
    Tensor::from_vec(xs, out).expect("softmax shape")
}

/// Per-pixel argmax over channels (first channel wins ties), one label map
/// per batch item.
pub fn argmax_channels(x: &Tensor) -> Vec<LabelMap> {
    let xs = x.shape();
    let xd = x.data();
    (0..xs.n)
        .map(|n| {
            let mut data = vec![0u8; xs.h * xs.w];
            for y in 0..xs.h {
                for x2 in 0..xs.w {
                    let mut best = xd[xs.idx(n, 0, y, x2)];
                    let mut best_c = 0usize;
                    for c in 1..xs.c {
                        let v = xd[xs.idx(n, c, y, x2)];
                        if v > best {
                            best = v;
                            best_c = c;
                        }
                    }
                    data[y * xs.w + x2] = best_c as u8;
                }
            }
            LabelMap { h: xs.h, w: xs.w, data }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, naive_conv2d, rand_tensor};

    #[test]
    fn conv2d_identity_1x1_kernel() {
        // 1x1 kernel that is the identity over channels leaves x unchanged.
        let x = rand_tensor((2, 3, 5, 4), 1);
        let mut w = vec![0.0f32; 3 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let p = ConvParams::new(Tensor::from_vec((3, 3, 1, 1), w).unwrap(), None, (1, 1), (0, 0)).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_close(y.data(), x.data(), 0.0);
    }

    #[test]
    fn conv2d_all_ones_3x3_padded() {
        // All-ones 3x3 input and kernel with pad 1: center 9, corners 4.
        let x = Tensor::full((1, 1, 3, 3), 1.0);
        let p = ConvParams::new(Tensor::full((1, 1, 3, 3), 1.0), None, (1, 1), (1, 1)).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn conv2d_output_shape() {
        let x = Tensor::zeros((2, 3, 8, 8));
        let p = ConvParams::new(Tensor::zeros((5, 3, 3, 3)), None, (2, 2), (1, 1)).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 4, 4));
    }

    #[test]
    fn conv2d_channel_mismatch_names_dimension() {
        let x = Tensor::zeros((1, 4, 8, 8));
        let p = ConvParams::new(Tensor::zeros((5, 3, 3, 3)), None, (1, 1), (0, 0)).unwrap();
        let err = conv2d(&x, &p).unwrap_err().to_string();
        assert!(err.contains("channels 4") && err.contains("3"), "got: {err}");
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        // Direct nested-loop summation oracle over several odd shapes.
        for (seed, xs, ks, stride, pad) in [
            (10, (2, 3, 7, 9), (4, 3, 3, 3), (1, 1), (1, 1)),
            (11, (1, 2, 8, 8), (3, 2, 5, 1), (2, 1), (2, 0)),
            (12, (2, 1, 6, 5), (2, 1, 1, 5), (1, 2), (0, 2)),
            (13, (1, 4, 5, 5), (4, 4, 2, 2), (2, 2), (0, 0)),
        ] {
            let x = rand_tensor(xs, seed);
            let w = rand_tensor(ks, seed + 100);
            let b = rand_tensor((1, ks.0, 1, 1), seed + 200);
            let p = ConvParams::new(w.clone(), Some(b.clone()), stride, pad).unwrap();
            let y = conv2d(&x, &p).unwrap();
            let y_ref = naive_conv2d(&x, &w, Some(b.data()), stride, pad);
            assert_close(y.data(), y_ref.data(), 1e-5);
        }
    }

    #[test]
    fn transposed_conv2d_copies_disjoint_blocks() {
        // Stride-2 2x2 all-ones kernel scatters each input into its own block.
        let x = Tensor::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = ConvParams::new(Tensor::full((1, 1, 2, 2), 1.0), None, (2, 2), (0, 0)).unwrap();
        let y = transposed_conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        let expect = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn transposed_conv2d_is_adjoint_of_conv2d() {
        // <conv(a), b> == <a, deconv(b)> with shared weights, 1e-5 relative.
        for (seed, xs, ks, stride, pad) in [
            (20, (1, 2, 5, 5), (3, 2, 3, 3), (1, 1), (1, 1)),
            (21, (2, 3, 6, 7), (2, 3, 4, 4), (2, 2), (1, 1)),
            (22, (1, 1, 5, 8), (4, 1, 1, 5), (1, 2), (0, 2)),
        ] {
            let a = rand_tensor(xs, seed);
            let w = rand_tensor(ks, seed + 50);
            let p = ConvParams::new(w, None, stride, pad).unwrap();
            let ca = conv2d(&a, &p).unwrap();
            let b = rand_tensor((ca.shape().n, ca.shape().c, ca.shape().h, ca.shape().w), seed + 99);
            let tb = conv2d_input_grad(&b, &p.weight, stride, pad, (xs.2, xs.3), None).unwrap();
            let lhs: f64 = ca.data().iter().zip(b.data()).map(|(&u, &v)| (u as f64) * (v as f64)).sum();
            let rhs: f64 = a.data().iter().zip(tb.data()).map(|(&u, &v)| (u as f64) * (v as f64)).sum();
            let denom = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-5,
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn transposed_conv2d_shape() {
        let x = Tensor::zeros((1, 3, 4, 4));
        let w = Tensor::zeros((3, 7, 4, 4));
        let p = ConvParams::new(w, None, (2, 2), (1, 1)).unwrap();
        let y = transposed_conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 7, 8, 8));
    }

    #[test]
    fn max_pool_constant_and_ramp() {
        let c = Tensor::full((1, 2, 4, 4), 3.5);
        let (y, _) = max_pool2d(&c, 2, 2, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));

        let ramp = Tensor::from_vec((1, 1, 4, 4), (0..16).map(|v| v as f32).collect()).unwrap();
        let (y, _) = max_pool2d(&ramp, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn max_pool_backward_routes_one_per_window() {
        let ramp = Tensor::from_vec((1, 1, 4, 4), (0..16).map(|v| v as f32).collect()).unwrap();
        let (y, arg) = max_pool2d(&ramp, 2, 2, 0).unwrap();
        let gout = Tensor::full(y.shape(), 1.0);
        let gx = max_pool2d_backward(&gout, &arg, ramp.shape());
        let ones: f32 = gx.data().iter().sum();
        assert_eq!(ones, 4.0);
        assert_eq!(gx.at(0, 0, 1, 1), 1.0);
        assert_eq!(gx.at(0, 0, 3, 3), 1.0);
    }

    #[test]
    fn max_pool_tie_takes_first_row_major() {
        let x = Tensor::full((1, 1, 2, 2), 1.0);
        let (_, arg) = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn max_pool_window_too_large_errors() {
        let x = Tensor::zeros((1, 1, 2, 2));
        assert!(max_pool2d(&x, 5, 1, 1).is_err());
    }

    #[test]
    fn relu_plus_mirror_is_abs() {
        let x = rand_tensor((1, 2, 3, 3), 33);
        let neg = x.map(|v| -v);
        let lhs = add(&relu(&neg), &relu(&x)).unwrap();
        let abs = x.map(f32::abs);
        assert_eq!(lhs.data(), abs.data());
    }

    #[test]
    fn pad_then_center_crop_is_identity() {
        let x = rand_tensor((2, 2, 4, 5), 44);
        let p = pad2d(&x, 2, 3, 0.0);
        let back = crop2d(&p, 2, 3, 4, 5).unwrap();
        assert!(back.bitwise_eq(&x));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let x = rand_tensor((1, 3, 6, 7), 55);
        let y = resize_bilinear(&x, 6, 7).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn batch_norm_normalizes() {
        let x = rand_tensor((2, 3, 5, 5), 66);
        let gamma = Tensor::full((1, 3, 1, 1), 1.0);
        let beta = Tensor::zeros((1, 3, 1, 1));
        let (y, _) = batch_norm2d_train(&x, &gamma, &beta, 1e-5).unwrap();
        let ys = y.shape();
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for n in 0..2 {
                for i in 0..25 {
                    let v = y.data()[ys.idx(n, c, i / 5, i % 5)] as f64;
                    sum += v;
                    sq += v * v;
                }
            }
            let m = 50.0;
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_channel_yields_beta() {
        let x = Tensor::full((1, 2, 4, 4), 7.0);
        let gamma = Tensor::full((1, 2, 1, 1), 2.0);
        let beta = Tensor::from_vec((1, 2, 1, 1), vec![0.5, -1.5]).unwrap();
        let (y, _) = batch_norm2d_train(&x, &gamma, &beta, 1e-5).unwrap();
        for i in 0..16 {
            assert!((y.data()[i] - 0.5).abs() < 1e-6);
            assert!((y.data()[16 + i] + 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_eval_with_batch_stats_matches_train() {
        let x = rand_tensor((2, 3, 6, 6), 77);
        let gamma = rand_tensor((1, 3, 1, 1), 78);
        let beta = rand_tensor((1, 3, 1, 1), 79);
        let (y_train, stats) = batch_norm2d_train(&x, &gamma, &beta, 1e-5).unwrap();
        let y_eval = batch_norm2d_eval(&x, &gamma, &beta, &stats.mean, &stats.var, 1e-5).unwrap();
        assert_close(y_eval.data(), y_train.data(), 1e-3);
    }

    #[test]
    fn loss_uniform_logits_is_ln_k() {
        for k in [2usize, 5, 21] {
            let logits = Tensor::zeros((1, k, 3, 3));
            let labels = vec![LabelMap::filled(3, 3, 1)];
            let (loss, count) = softmax_ce_loss(&logits, &labels, IGNORE_LABEL).unwrap();
            assert_eq!(count, 9);
            assert!((loss - (k as f32).ln()).abs() < 1e-6, "k={k} loss={loss}");
        }
    }

    #[test]
    fn loss_one_hot_margin_goes_to_zero() {
        let mut prev = f32::INFINITY;
        for margin in [1.0f32, 4.0, 16.0] {
            let mut data = vec![0.0f32; 2 * 4];
            for i in 0..4 {
                data[i] = margin;
            }
            let logits = Tensor::from_vec((1, 2, 2, 2), data).unwrap();
            let labels = vec![LabelMap::filled(2, 2, 0)];
            let (loss, _) = softmax_ce_loss(&logits, &labels, IGNORE_LABEL).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn loss_two_class_closed_form() {
        let logits = Tensor::from_vec((1, 2, 1, 1), vec![1.0, 0.0]).unwrap();
        let labels = vec![LabelMap::filled(1, 1, 0)];
        let (loss, _) = softmax_ce_loss(&logits, &labels, IGNORE_LABEL).unwrap();
        let expect = (1.0f64 + (-1.0f64).exp()).ln() as f32;
        assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");
    }

    #[test]
    fn loss_all_ignored_errors() {
        let logits = Tensor::zeros((1, 3, 2, 2));
        let labels = vec![LabelMap::filled(2, 2, IGNORE_LABEL)];
        let err = softmax_ce_loss(&logits, &labels, IGNORE_LABEL).unwrap_err().to_string();
        assert!(err.contains("empty loss support"), "got: {err}");
    }

    #[test]
    fn argmax_first_channel_wins_ties() {
        let x = Tensor::from_vec((1, 2, 1, 2), vec![1.0, 3.0, 1.0, 2.0]).unwrap();
        let labs = argmax_channels(&x);
        assert_eq!(labs[0].data, vec![0, 0]);
    }
}

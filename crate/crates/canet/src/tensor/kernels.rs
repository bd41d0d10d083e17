//! Dense f64 kernels for the spatial operators and their backward passes.
//!
//! Parallel loops hand each worker its own slice of the output, so results
//! are bitwise identical for any thread count.

use rayon::prelude::*;

use super::{Shape, Tensor};

/// Convolution hyperparameters. Kernels are square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

pub fn conv_out_extent(extent: usize, k: usize, spec: &ConvSpec) -> usize {
    (extent + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1
}

/// Output index range `o` such that `o*stride + tap` lands inside `[0, extent)`.
#[inline]
fn valid_out_range(tap: isize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if tap < 0 { (-tap + s - 1) / s } else { 0 };
    let hi = ((extent as isize - tap) + s - 1) / s;
    let lo = lo.max(0) as usize;
    let hi = hi.clamp(0, out_extent as isize) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (c_out, cin_g, k) = (ws.n, ws.c, ws.h);
    let oh = conv_out_extent(xs.h, k, spec);
    let ow = conv_out_extent(xs.w, k, spec);
    let out_shape = Shape::new(xs.n, c_out, oh, ow);
    let ocpg = c_out / spec.groups;

    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; out_shape.numel()];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o)| {
        let n = plane / c_out;
        let oc = plane % c_out;
        let g = oc / ocpg;
        if let Some(bias) = b {
            o.fill(bias.data()[oc]);
        }
        for icg in 0..cin_g {
            let ic = g * cin_g + icg;
            let x_base = (n * xs.c + ic) * xs.h * xs.w;
            for ky in 0..k {
                let ty = (ky * spec.dilation) as isize - spec.padding as isize;
                let (oy0, oy1) = valid_out_range(ty, spec.stride, xs.h, oh);
                for kx in 0..k {
                    let wv = wd[((oc * cin_g + icg) * k + ky) * k + kx];
                    let tx = (kx * spec.dilation) as isize - spec.padding as isize;
                    let (ox0, ox1) = valid_out_range(tx, spec.stride, xs.w, ow);
                    for oy in oy0..oy1 {
                        let iy = (oy * spec.stride) as isize + ty;
                        let xrow = &xd[x_base + iy as usize * xs.w..];
                        let orow = &mut o[oy * ow..oy * ow + ow];
                        let mut ix = (ox0 * spec.stride) as isize + tx;
                        for ov in orow[ox0..ox1].iter_mut() {
                            *ov += wv * xrow[ix as usize];
                            ix += spec.stride as isize;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input(dy: &Tensor, x_shape: Shape, w: &Tensor, spec: &ConvSpec) -> Tensor {
    let ws = w.shape();
    let (c_out, cin_g, k) = (ws.n, ws.c, ws.h);
    let ys = dy.shape();
    let ocpg = c_out / spec.groups;

    let dyd = dy.data();
    let wd = w.data();
    let mut dx = vec![0.0; x_shape.numel()];
    let img = x_shape.c * x_shape.h * x_shape.w;
    dx.par_chunks_mut(img).enumerate().for_each(|(n, dxn)| {
        for oc in 0..c_out {
            let g = oc / ocpg;
            let dy_base = (n * c_out + oc) * ys.h * ys.w;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let dx_base = ic * x_shape.h * x_shape.w;
                for ky in 0..k {
                    let ty = (ky * spec.dilation) as isize - spec.padding as isize;
                    let (oy0, oy1) = valid_out_range(ty, spec.stride, x_shape.h, ys.h);
                    for kx in 0..k {
                        let wv = wd[((oc * cin_g + icg) * k + ky) * k + kx];
                        let tx = (kx * spec.dilation) as isize - spec.padding as isize;
                        let (ox0, ox1) = valid_out_range(tx, spec.stride, x_shape.w, ys.w);
                        for oy in oy0..oy1 {
                            let iy = ((oy * spec.stride) as isize + ty) as usize;
                            let dxrow = &mut dxn[dx_base + iy * x_shape.w..dx_base + (iy + 1) * x_shape.w];
                            let dyrow = &dyd[dy_base + oy * ys.w..];
                            let mut ix = (ox0 * spec.stride) as isize + tx;
                            for gv in dyrow[ox0..ox1].iter() {
                                dxrow[ix as usize] += wv * gv;
                                ix += spec.stride as isize;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(x_shape, dx)
}

/// Gradient with respect to the convolution weights.
pub fn conv2d_backward_weight(dy: &Tensor, x: &Tensor, w_shape: Shape, spec: &ConvSpec) -> Tensor {
    let xs = x.shape();
    let ys = dy.shape();
    let (c_out, cin_g, k) = (w_shape.n, w_shape.c, w_shape.h);
    let ocpg = c_out / spec.groups;

    let xd = x.data();
    let dyd = dy.data();
    let mut dw = vec![0.0; w_shape.numel()];
    dw.par_chunks_mut(cin_g * k * k).enumerate().for_each(|(oc, dwoc)| {
        let g = oc / ocpg;
        for n in 0..xs.n {
            let dy_base = (n * c_out + oc) * ys.h * ys.w;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let x_base = (n * xs.c + ic) * xs.h * xs.w;
                for ky in 0..k {
                    let ty = (ky * spec.dilation) as isize - spec.padding as isize;
                    let (oy0, oy1) = valid_out_range(ty, spec.stride, xs.h, ys.h);
                    for kx in 0..k {
                        let tx = (kx * spec.dilation) as isize - spec.padding as isize;
                        let (ox0, ox1) = valid_out_range(tx, spec.stride, xs.w, ys.w);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = ((oy * spec.stride) as isize + ty) as usize;
                            let xrow = &xd[x_base + iy * xs.w..];
                            let dyrow = &dyd[dy_base + oy * ys.w..];
                            let mut ix = (ox0 * spec.stride) as isize + tx;
                            for gv in dyrow[ox0..ox1].iter() {
                                acc += gv * xrow[ix as usize];
                                ix += spec.stride as isize;
                            }
                        }
                        dwoc[(icg * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    Tensor::from_vec(w_shape, dw)
}

pub fn conv2d_backward_bias(dy: &Tensor) -> Tensor {
    let ys = dy.shape();
    let mut db = vec![0.0; ys.c];
    for n in 0..ys.n {
        for (c, slot) in db.iter_mut().enumerate() {
            let base = (n * ys.c + c) * ys.h * ys.w;
            let mut acc = 0.0;
            for v in &dy.data()[base..base + ys.h * ys.w] {
                acc += v;
            }
            *slot += acc;
        }
    }
    Tensor::from_vec(Shape::new(ys.c, 1, 1, 1), db)
}

/// Ceil-mode average pooling with `factor`-sized windows. Edge windows are
/// averaged over their true (possibly smaller) extent, so constant fields map
/// to the same constant for any factor and input size.
pub fn avg_pool_forward(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    let oh = s.h.div_ceil(factor);
    let ow = s.w.div_ceil(factor);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let xd = x.data();
    let mut out = vec![0.0; out_shape.numel()];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o)| {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            let y0 = oy * factor;
            let y1 = (y0 + factor).min(s.h);
            for ox in 0..ow {
                let x0 = ox * factor;
                let x1 = (x0 + factor).min(s.w);
                // Shifted mean: constant windows come out bit-exact even
                // when the window element count is not a power of two.
                let first = xd[base + y0 * s.w + x0];
                let mut acc = 0.0;
                for y in y0..y1 {
                    for v in &xd[base + y * s.w + x0..base + y * s.w + x1] {
                        acc += v - first;
                    }
                }
                o[oy * ow + ox] = first + acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

pub fn avg_pool_backward(dy: &Tensor, x_shape: Shape, factor: usize) -> Tensor {
    let ys = dy.shape();
    let dyd = dy.data();
    let mut dx = vec![0.0; x_shape.numel()];
    dx.par_chunks_mut(x_shape.h * x_shape.w).enumerate().for_each(|(plane, dxp)| {
        let base = plane * ys.h * ys.w;
        for oy in 0..ys.h {
            let y0 = oy * factor;
            let y1 = (y0 + factor).min(x_shape.h);
            for ox in 0..ys.w {
                let x0 = ox * factor;
                let x1 = (x0 + factor).min(x_shape.w);
                let g = dyd[base + oy * ys.w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in dxp[y * x_shape.w + x0..y * x_shape.w + x1].iter_mut() {
                        *v += g;
                    }
                }
            }
        }
    });
    Tensor::from_vec(x_shape, dx)
}

pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let count = (s.h * s.w) as f64;
    let mut out = vec![0.0; s.n * s.c];
    for (plane, o) in out.iter_mut().enumerate() {
        let base = plane * s.h * s.w;
        let first = x.data()[base];
        let mut acc = 0.0;
        for v in &x.data()[base..base + s.h * s.w] {
            acc += v - first;
        }
        *o = first + acc / count;
    }
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out)
}

pub fn global_avg_pool_backward(dy: &Tensor, x_shape: Shape) -> Tensor {
    let inv = 1.0 / (x_shape.h * x_shape.w) as f64;
    let mut dx = vec![0.0; x_shape.numel()];
    for (plane, chunk) in dx.chunks_mut(x_shape.h * x_shape.w).enumerate() {
        let g = dy.data()[plane] * inv;
        chunk.fill(g);
    }
    Tensor::from_vec(x_shape, dx)
}

/// Source coordinate and interpolation weights for one output position under
/// the align-corners-false convention, with clamping at the borders.
#[inline]
fn bilinear_taps(o: usize, out_extent: usize, in_extent: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * in_extent as f64 / out_extent as f64 - 0.5;
    let src = src.clamp(0.0, (in_extent - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_extent - 1);
    (lo, hi, src - lo as f64)
}

pub fn bilinear_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let xd = x.data();

    let ytaps: Vec<_> = (0..oh).map(|oy| bilinear_taps(oy, oh, s.h)).collect();
    let xtaps: Vec<_> = (0..ow).map(|ox| bilinear_taps(ox, ow, s.w)).collect();

    let mut out = vec![0.0; out_shape.numel()];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o)| {
        let base = plane * s.h * s.w;
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            let r0 = &xd[base + y0 * s.w..base + y0 * s.w + s.w];
            let r1 = &xd[base + y1 * s.w..base + y1 * s.w + s.w];
            let orow = &mut o[oy * ow..(oy + 1) * ow];
            for (ov, &(x0, x1, tx)) in orow.iter_mut().zip(xtaps.iter()) {
                let top = r0[x0] + tx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + tx * (r1[x1] - r1[x0]);
                *ov = top + ty * (bot - top);
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Transposed-weights backward for bilinear interpolation: each output
/// gradient is scattered to its four source taps.
pub fn bilinear_backward(dy: &Tensor, x_shape: Shape) -> Tensor {
    let ys = dy.shape();
    let ytaps: Vec<_> = (0..ys.h).map(|oy| bilinear_taps(oy, ys.h, x_shape.h)).collect();
    let xtaps: Vec<_> = (0..ys.w).map(|ox| bilinear_taps(ox, ys.w, x_shape.w)).collect();
    let dyd = dy.data();
    let mut dx = vec![0.0; x_shape.numel()];
    dx.par_chunks_mut(x_shape.h * x_shape.w).enumerate().for_each(|(plane, dxp)| {
        let base = plane * ys.h * ys.w;
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                let g = dyd[base + oy * ys.w + ox];
                dxp[y0 * x_shape.w + x0] += g * (1.0 - ty) * (1.0 - tx);
                dxp[y0 * x_shape.w + x1] += g * (1.0 - ty) * tx;
                dxp[y1 * x_shape.w + x0] += g * ty * (1.0 - tx);
                dxp[y1 * x_shape.w + x1] += g * ty * tx;
            }
        }
    });
    Tensor::from_vec(x_shape, dx)
}

/// Per-channel mean and biased variance over the (N, H, W) axes.
pub fn bn_channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.n * s.h * s.w) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            let base = (n * s.c + c) * s.h * s.w;
            for v in &x.data()[base..base + s.h * s.w] {
                acc += v;
            }
        }
        mean[c] = acc / count;
        let mut vacc = 0.0;
        for n in 0..s.n {
            let base = (n * s.c + c) * s.h * s.w;
            for v in &x.data()[base..base + s.h * s.w] {
                let d = v - mean[c];
                vacc += d * d;
            }
        }
        var[c] = vacc / count;
    }
    (mean, var)
}

/// Normalize with the given per-channel statistics: y = scale * x_hat + shift.
pub fn bn_normalize(x: &Tensor, mean: &[f64], var: &[f64], scale: &[f64], shift: &[f64], eps: f64) -> Tensor {
    let s = x.shape();
    let mut out = vec![0.0; s.numel()];
    out.par_chunks_mut(s.h * s.w).enumerate().for_each(|(plane, o)| {
        let c = plane % s.c;
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let a = scale[c] * inv_std;
        let b = shift[c] - mean[c] * a;
        let base = plane * s.h * s.w;
        for (ov, xv) in o.iter_mut().zip(&x.data()[base..base + s.h * s.w]) {
            *ov = a * xv + b;
        }
    });
    Tensor::from_vec(s, out)
}

pub struct BnGrads {
    pub dx: Tensor,
    pub dscale: Vec<f64>,
    pub dshift: Vec<f64>,
}

/// Backward through train-mode batch norm (statistics are a function of x).
pub fn bn_backward_train(
    dy: &Tensor,
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    scale: &[f64],
    eps: f64,
) -> BnGrads {
    let s = x.shape();
    let count = (s.n * s.h * s.w) as f64;
    let mut dscale = vec![0.0; s.c];
    let mut dshift = vec![0.0; s.c];
    // Per-channel sums of dy and dy * x_hat.
    for c in 0..s.c {
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..s.n {
            let base = (n * s.c + c) * s.h * s.w;
            let xr = &x.data()[base..base + s.h * s.w];
            let gr = &dy.data()[base..base + s.h * s.w];
            for (xv, gv) in xr.iter().zip(gr) {
                sum_dy += gv;
                sum_dy_xhat += gv * (xv - mean[c]) * inv_std;
            }
        }
        dshift[c] = sum_dy;
        dscale[c] = sum_dy_xhat;
    }
    let mut dx = vec![0.0; s.numel()];
    dx.par_chunks_mut(s.h * s.w).enumerate().for_each(|(plane, o)| {
        let c = plane % s.c;
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let mean_dy = dshift[c] / count;
        let mean_dy_xhat = dscale[c] / count;
        let base = plane * s.h * s.w;
        let xr = &x.data()[base..base + s.h * s.w];
        let gr = &dy.data()[base..base + s.h * s.w];
        for ((ov, xv), gv) in o.iter_mut().zip(xr).zip(gr) {
            let xhat = (xv - mean[c]) * inv_std;
            *ov = scale[c] * inv_std * (gv - mean_dy - xhat * mean_dy_xhat);
        }
    });
    BnGrads { dx: Tensor::from_vec(s, dx), dscale, dshift }
}

/// Backward through eval-mode batch norm (statistics are constants).
pub fn bn_backward_eval(
    dy: &Tensor,
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    scale: &[f64],
    eps: f64,
) -> BnGrads {
    let s = x.shape();
    let mut dscale = vec![0.0; s.c];
    let mut dshift = vec![0.0; s.c];
    let mut dx = vec![0.0; s.numel()];
    for plane in 0..s.n * s.c {
        let c = plane % s.c;
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let base = plane * s.h * s.w;
        let xr = &x.data()[base..base + s.h * s.w];
        let gr = &dy.data()[base..base + s.h * s.w];
        let dxr = &mut dx[base..base + s.h * s.w];
        for ((ov, xv), gv) in dxr.iter_mut().zip(xr).zip(gr) {
            dshift[c] += gv;
            dscale[c] += gv * (xv - mean[c]) * inv_std;
            *ov = gv * scale[c] * inv_std;
        }
    }
    BnGrads { dx: Tensor::from_vec(s, dx), dscale, dshift }
}

pub struct CeResult {
    pub loss: f64,
    /// Softmax probabilities, saved for the backward pass.
    pub probs: Tensor,
    /// Number of pixels that contributed to the mean.
    pub counted: usize,
}

/// Mean cross-entropy over non-ignored pixels, stabilized by max-subtraction.
pub fn softmax_ce_forward(logits: &Tensor, labels: &[u8], ignore: u8) -> CeResult {
    let s = logits.shape();
    let k = s.c;
    let plane = s.h * s.w;
    let mut probs = vec![0.0; s.numel()];
    let mut loss = 0.0;
    let mut counted = 0usize;
    for n in 0..s.n {
        let base = n * k * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(logits.data()[base + c * plane + p]);
            }
            let mut denom = 0.0;
            for c in 0..k {
                let e = (logits.data()[base + c * plane + p] - max).exp();
                probs[base + c * plane + p] = e;
                denom += e;
            }
            for c in 0..k {
                probs[base + c * plane + p] /= denom;
            }
            let label = labels[n * plane + p];
            if label != ignore {
                // Clamp exp underflow away from zero, but let NaN through so
                // divergence stays visible.
                let mut prob = probs[base + label as usize * plane + p];
                if prob < f64::MIN_POSITIVE {
                    prob = f64::MIN_POSITIVE;
                }
                loss -= prob.ln();
                counted += 1;
            }
        }
    }
    if counted > 0 {
        loss /= counted as f64;
    } else {
        loss = 0.0;
    }
    CeResult { loss, probs: Tensor::from_vec(s, probs), counted }
}

pub fn softmax_ce_backward(
    upstream: f64,
    probs: &Tensor,
    labels: &[u8],
    ignore: u8,
    counted: usize,
) -> Tensor {
    let s = probs.shape();
    let plane = s.h * s.w;
    let mut dx = vec![0.0; s.numel()];
    if counted == 0 {
        return Tensor::from_vec(s, dx);
    }
    let g = upstream / counted as f64;
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let label = labels[n * plane + p];
            if label == ignore {
                continue;
            }
            for c in 0..s.c {
                let idx = base + c * plane + p;
                let delta = if c == label as usize { 1.0 } else { 0.0 };
                dx[idx] = g * (probs.data()[idx] - delta);
            }
        }
    }
    Tensor::from_vec(s, dx)
}

//! Dense f64 tensor kernels: conv2d, batch norm, ReLU, average pooling,
//! global average pooling and the FC head, each with its exact backward
//! pass.
//!
//! Activations live in [n][c][h][w] buffers. Work parallelizes across the
//! batch (or across channels for reductions) with per-item partials summed
//! in fixed index order, so results are bit-identical regardless of thread
//! count.

use rayon::prelude::*;

/// Batched activation tensor, image-major, channels contiguous per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub data: Vec<f64>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Act {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Act {
        Act {
            data: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.plane()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.image_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// View of the whole tensor.
    pub fn view(&self) -> View<'_> {
        self.prefix(self.c)
    }

    /// View of the first `c` channels of every image. Because channels are
    /// contiguous per image, a dense-block layer's input is exactly such a
    /// prefix of the running concatenation state.
    pub fn prefix(&self, c: usize) -> View<'_> {
        debug_assert!(c <= self.c);
        View {
            data: &self.data,
            n: self.n,
            c,
            h: self.h,
            w: self.w,
            img_stride: self.image_len(),
        }
    }

    /// Copy `src` (same n/h/w, src.c <= self.c) into channels
    /// [at, at + src.c) of every image.
    pub fn write_channels(&mut self, at: usize, src: &Act) {
        debug_assert_eq!(self.n, src.n);
        debug_assert_eq!(self.plane(), src.plane());
        debug_assert!(at + src.c <= self.c);
        let plane = self.plane();
        let dst_len = self.image_len();
        let src_len = src.image_len();
        for i in 0..self.n {
            let d = &mut self.data[i * dst_len + at * plane..i * dst_len + (at + src.c) * plane];
            d.copy_from_slice(&src.data[i * src_len..(i + 1) * src_len]);
        }
    }

    /// Extract channels [from, from + count) into a fresh tensor.
    pub fn extract_channels(&self, from: usize, count: usize) -> Act {
        debug_assert!(from + count <= self.c);
        let plane = self.plane();
        let mut out = Act::zeros(self.n, count, self.h, self.w);
        let src_len = self.image_len();
        let dst_len = out.image_len();
        for i in 0..self.n {
            out.data[i * dst_len..(i + 1) * dst_len].copy_from_slice(
                &self.data[i * src_len + from * plane..i * src_len + (from + count) * plane],
            );
        }
        out
    }

    /// Add `other` (other.c <= self.c) into the channel prefix of `self`.
    pub fn add_into_prefix(&mut self, other: &Act) {
        debug_assert_eq!(self.n, other.n);
        debug_assert!(other.c <= self.c);
        debug_assert_eq!(self.plane(), other.plane());
        let dst_len = self.image_len();
        let src_len = other.image_len();
        for i in 0..self.n {
            let d = &mut self.data[i * dst_len..i * dst_len + src_len];
            let s = &other.data[i * src_len..(i + 1) * src_len];
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv += sv;
            }
        }
    }

    /// Keep only the first `c` channels.
    pub fn truncate_channels(&self, c: usize) -> Act {
        self.extract_channels(0, c)
    }
}

/// Borrowed channel-prefix view over an [`Act`].
#[derive(Clone, Copy)]
pub struct View<'a> {
    data: &'a [f64],
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    img_stride: usize,
}

impl<'a> View<'a> {
    pub fn image(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.img_stride..i * self.img_stride + self.c * self.h * self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// 2-D convolution, stride 1. Weights are [out_c][in_c][k][k], one bias per
/// output channel. Output spatial size is h + 2*pad - k + 1.
pub fn conv2d_forward(
    x: &View<'_>,
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
    k: usize,
    pad: usize,
) -> Act {
    let (n, in_c, h, w) = (x.n, x.c, x.h, x.w);
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    debug_assert_eq!(weights.len(), out_c * in_c * k * k);
    let mut out = Act::zeros(n, out_c, oh, ow);
    let oimg_len = out.image_len();
    let images: Vec<(usize, &mut [f64])> = out.data.chunks_mut(oimg_len).enumerate().collect();
    images.into_par_iter().for_each(|(i, oimg)| {
        conv_image(x.image(i), in_c, h, w, weights, bias, out_c, k, pad, oimg, oh, ow);
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_image(
    x: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
    k: usize,
    pad: usize,
    out: &mut [f64],
    oh: usize,
    ow: usize,
) {
    let oplane = oh * ow;
    for oc in 0..out_c {
        out[oc * oplane..(oc + 1) * oplane].fill(bias[oc]);
    }
    for oc in 0..out_c {
        for ic in 0..in_c {
            let xplane = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((oc * in_c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let run = ox_hi - ox_lo;
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let orow = oc * oplane + oy * ow + ox_lo;
                        let irow = iy * w + ox_lo + kx - pad;
                        let (dst, src) = (&mut out[orow..orow + run], &xplane[irow..irow + run]);
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv2d_forward`]: gradients for the input view, the
/// weights and the biases. Weight partials are computed per image then
/// summed in batch order.
pub fn conv2d_backward(
    x: &View<'_>,
    weights: &[f64],
    grad_out: &Act,
    k: usize,
    pad: usize,
) -> (Act, Vec<f64>, Vec<f64>) {
    let (n, in_c, h, w) = (x.n, x.c, x.h, x.w);
    let out_c = grad_out.c;
    let (oh, ow) = (grad_out.h, grad_out.w);
    let wlen = out_c * in_c * k * k;

    let mut grad_x = Act::zeros(n, in_c, h, w);
    let gx_len = grad_x.image_len();
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = {
        let gx_images: Vec<(usize, &mut [f64])> =
            grad_x.data.chunks_mut(gx_len).enumerate().collect();
        gx_images
            .into_par_iter()
            .map(|(i, gx)| {
                let ximg = x.image(i);
                let goimg = grad_out.image(i);
                let mut gw = vec![0.0; wlen];
                let mut gb = vec![0.0; out_c];
                let oplane = oh * ow;
                for oc in 0..out_c {
                    let goplane = &goimg[oc * oplane..(oc + 1) * oplane];
                    gb[oc] += goplane.iter().sum::<f64>();
                    for ic in 0..in_c {
                        let xplane = &ximg[ic * h * w..(ic + 1) * h * w];
                        let gxplane_base = ic * h * w;
                        for ky in 0..k {
                            for kx in 0..k {
                                let widx = ((oc * in_c + ic) * k + ky) * k + kx;
                                let wv = weights[widx];
                                let ox_lo = pad.saturating_sub(kx);
                                let ox_hi = (w + pad - kx).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let run = ox_hi - ox_lo;
                                let mut gw_acc = 0.0;
                                for oy in 0..oh {
                                    let iy = oy + ky;
                                    if iy < pad || iy >= h + pad {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    let orow = oy * ow + ox_lo;
                                    let irow = iy * w + ox_lo + kx - pad;
                                    let go_row = &goplane[orow..orow + run];
                                    let x_row = &xplane[irow..irow + run];
                                    for (&g, &xv) in go_row.iter().zip(x_row) {
                                        gw_acc += g * xv;
                                    }
                                    if wv != 0.0 {
                                        let gx_row =
                                            &mut gx[gxplane_base + irow..gxplane_base + irow + run];
                                        for (gxv, &g) in gx_row.iter_mut().zip(go_row) {
                                            *gxv += wv * g;
                                        }
                                    }
                                }
                                gw[widx] += gw_acc;
                            }
                        }
                    }
                }
                (gw, gb)
            })
            .collect()
    };

    let mut grad_w = vec![0.0; wlen];
    let mut grad_b = vec![0.0; out_c];
    for (gw, gb) in &per_image {
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in grad_b.iter_mut().zip(gb) {
            *a += b;
        }
    }
    (grad_x, grad_w, grad_b)
}

/// Per-channel batch statistics cache from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch norm over (n, h, w) per channel, biased (1/N) variance.
pub fn batchnorm_forward_train(
    x: &View<'_>,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Act, BnCache) {
    let (n, c, h, w) = (x.n, x.c, x.h, x.w);
    let plane = h * w;
    let count = (n * plane) as f64;

    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for i in 0..n {
                let img = x.image(i);
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let mean = sum / count;
            let var = (sum_sq / count - mean * mean).max(0.0);
            (mean, var)
        })
        .collect();

    let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let y = bn_affine(x, gamma, beta, &mean, &var, eps);
    (y, BnCache { mean, var })
}

/// Batch norm with frozen (running) statistics.
pub fn batchnorm_forward_eval(
    x: &View<'_>,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Act {
    bn_affine(x, gamma, beta, mean, var, eps)
}

fn bn_affine(x: &View<'_>, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Act {
    let (n, c, h, w) = (x.n, x.c, x.h, x.w);
    let plane = h * w;
    let scale: Vec<f64> = (0..c)
        .map(|ch| gamma[ch] / (var[ch] + eps).sqrt())
        .collect();
    let shift: Vec<f64> = (0..c).map(|ch| beta[ch] - mean[ch] * scale[ch]).collect();
    let mut y = Act::zeros(n, c, h, w);
    let img_len = y.image_len();
    let images: Vec<(usize, &mut [f64])> = y.data.chunks_mut(img_len).enumerate().collect();
    images.into_par_iter().for_each(|(i, yimg)| {
        let ximg = x.image(i);
        for ch in 0..c {
            let (s, t) = (scale[ch], shift[ch]);
            let dst = &mut yimg[ch * plane..(ch + 1) * plane];
            let src = &ximg[ch * plane..(ch + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * s + t;
            }
        }
    });
    y
}

/// Exact backward through training-mode batch norm (gradients flow through
/// the batch statistics).
pub fn batchnorm_backward(
    x: &View<'_>,
    cache: &BnCache,
    gamma: &[f64],
    grad_y: &Act,
    eps: f64,
) -> (Act, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (x.n, x.c, x.h, x.w);
    let plane = h * w;
    let count = (n * plane) as f64;

    // Reductions per channel: sum(dy) and sum(dy * xhat).
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let inv_std = 1.0 / (cache.var[ch] + eps).sqrt();
            let mean = cache.mean[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                let ximg = x.image(i);
                let gimg = grad_y.image(i);
                let xs = &ximg[ch * plane..(ch + 1) * plane];
                let gs = &gimg[ch * plane..(ch + 1) * plane];
                for (&xv, &gv) in xs.iter().zip(gs) {
                    sum_dy += gv;
                    sum_dy_xhat += gv * (xv - mean) * inv_std;
                }
            }
            (sum_dy, sum_dy_xhat)
        })
        .collect();

    let grad_beta: Vec<f64> = sums.iter().map(|s| s.0).collect();
    let grad_gamma: Vec<f64> = sums.iter().map(|s| s.1).collect();

    let mut grad_x = Act::zeros(n, c, h, w);
    let img_len = grad_x.image_len();
    let images: Vec<(usize, &mut [f64])> = grad_x.data.chunks_mut(img_len).enumerate().collect();
    images.into_par_iter().for_each(|(i, gximg)| {
        let ximg = x.image(i);
        let gimg = grad_y.image(i);
        for ch in 0..c {
            let inv_std = 1.0 / (cache.var[ch] + eps).sqrt();
            let mean = cache.mean[ch];
            let g_scale = gamma[ch] * inv_std;
            let mean_dy = sums[ch].0 / count;
            let mean_dy_xhat = sums[ch].1 / count;
            let xs = &ximg[ch * plane..(ch + 1) * plane];
            let gs = &gimg[ch * plane..(ch + 1) * plane];
            let dst = &mut gximg[ch * plane..(ch + 1) * plane];
            for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                let xhat = (xv - mean) * inv_std;
                *d = g_scale * (gv - mean_dy - xhat * mean_dy_xhat);
            }
        }
    });

    (grad_x, grad_gamma, grad_beta)
}

/// ReLU, consuming its input; the returned tensor doubles as the backward
/// mask (derivative taken as 0 at the kink).
pub fn relu_forward(mut x: Act) -> Act {
    x.data.par_iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    x
}

pub fn relu_backward_inplace(grad: &mut Act, activated: &Act) {
    grad.data
        .iter_mut()
        .zip(&activated.data)
        .for_each(|(g, &a)| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
}

/// 2x2 average pooling, stride 2 (odd tails are dropped).
pub fn avgpool2_forward(x: &Act) -> Act {
    let (n, c, h, w) = (x.n, x.c, x.h, x.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Act::zeros(n, c, oh, ow);
    let img_len = out.image_len();
    let images: Vec<(usize, &mut [f64])> = out.data.chunks_mut(img_len).enumerate().collect();
    images.into_par_iter().for_each(|(i, oimg)| {
        let ximg = x.image(i);
        for ch in 0..c {
            let xplane = &ximg[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut oimg[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    oplane[oy * ow + ox] =
                        0.25 * (xplane[base] + xplane[base + 1] + xplane[base + w] + xplane[base + w + 1]);
                }
            }
        }
    });
    out
}

pub fn avgpool2_backward(grad_out: &Act, h: usize, w: usize) -> Act {
    let (n, c, oh, ow) = (grad_out.n, grad_out.c, grad_out.h, grad_out.w);
    let mut grad_x = Act::zeros(n, c, h, w);
    let img_len = grad_x.image_len();
    let images: Vec<(usize, &mut [f64])> = grad_x.data.chunks_mut(img_len).enumerate().collect();
    images.into_par_iter().for_each(|(i, gximg)| {
        let gimg = grad_out.image(i);
        for ch in 0..c {
            let gplane = &gimg[ch * oh * ow..(ch + 1) * oh * ow];
            let xplane = &mut gximg[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = 0.25 * gplane[oy * ow + ox];
                    let base = 2 * oy * w + 2 * ox;
                    xplane[base] += g;
                    xplane[base + 1] += g;
                    xplane[base + w] += g;
                    xplane[base + w + 1] += g;
                }
            }
        }
    });
    grad_x
}

/// Global average pooling: per-image, per-channel spatial mean. Returns a
/// row-major [n][c] feature matrix.
pub fn gap_forward(x: &Act) -> Vec<f64> {
    let (n, c) = (x.n, x.c);
    let plane = x.plane() as f64;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let img = x.image(i);
        for ch in 0..c {
            out[i * c + ch] =
                img[ch * x.plane()..(ch + 1) * x.plane()].iter().sum::<f64>() / plane;
        }
    }
    out
}

pub fn gap_backward(grad_feat: &[f64], n: usize, c: usize, h: usize, w: usize) -> Act {
    let mut out = Act::zeros(n, c, h, w);
    let plane = h * w;
    let inv = 1.0 / plane as f64;
    for i in 0..n {
        let img = out.image_mut(i);
        for ch in 0..c {
            let g = grad_feat[i * c + ch] * inv;
            img[ch * plane..(ch + 1) * plane].fill(g);
        }
    }
    out
}

/// Fully-connected head: one logit per image.
pub fn fc_forward(feat: &[f64], n: usize, c: usize, weights: &[f64], bias: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            bias + feat[i * c..(i + 1) * c]
                .iter()
                .zip(weights)
                .map(|(&f, &w)| f * w)
                .sum::<f64>()
        })
        .collect()
}

pub fn fc_backward(
    feat: &[f64],
    n: usize,
    c: usize,
    weights: &[f64],
    grad_logits: &[f64],
) -> (Vec<f64>, Vec<f64>, f64) {
    let mut grad_feat = vec![0.0; n * c];
    let mut grad_w = vec![0.0; c];
    let mut grad_b = 0.0;
    for i in 0..n {
        let g = grad_logits[i];
        grad_b += g;
        let f = &feat[i * c..(i + 1) * c];
        let gf = &mut grad_feat[i * c..(i + 1) * c];
        for ch in 0..c {
            grad_w[ch] += g * f[ch];
            gf[ch] = g * weights[ch];
        }
    }
    (grad_feat, grad_w, grad_b)
}

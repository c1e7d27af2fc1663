//! Forward and backward kernels of the layer vocabulary.
//!
//! All kernels are single-threaded with a fixed summation order, so
//! results are bit-reproducible run to run.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Four-lane dot product with a fixed reduction order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Calls `f(tap, out_start, out_end, in_start)` for every row segment where
/// a `k x k` stencil with zero padding `k / 2` overlaps the input.
#[inline]
fn for_each_tap(h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let pad = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - pad;
        let oy0 = (-dy).max(0) as usize;
        let oy1 = (h as isize - dy).min(h as isize).max(0) as usize;
        for kx in 0..k {
            let dx = kx as isize - pad;
            let x0 = (-dx).max(0) as usize;
            let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
            if x0 >= x1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = (oy as isize + dy) as usize;
                f(ky * k + kx, oy * w + x0, oy * w + x1, iy * w + (x0 as isize + dx) as usize);
            }
        }
    }
}

fn conv_dims(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, k) = match weight.shape()[..] {
        [co, ci, k, k2] if k == k2 && k % 2 == 1 => (co, ci, k),
        _ => return Err(Error::Shape(format!("bad conv weight {:?}", weight.shape()))),
    };
    if ci != c {
        return Err(Error::Shape(format!("conv expects {ci} input channels, got {c}")));
    }
    Ok((n, c, h, w, co, k))
}

/// Stride-1 convolution with zero padding `k / 2` (so 3x3 keeps the size
/// and 1x1 has no padding).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, ci, h, w, co, k) = conv_dims(x, weight)?;
    if bias.len() != co {
        return Err(Error::Shape(format!("conv bias has {} elements, expected {co}", bias.len())));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, co, h, w]);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let od = out.data_mut();
    for b in 0..n {
        for o in 0..co {
            let dst = &mut od[(b * co + o) * plane..(b * co + o + 1) * plane];
            dst.fill(bd[o]);
            for i in 0..ci {
                let src = &xd[(b * ci + i) * plane..(b * ci + i + 1) * plane];
                let taps = &wd[(o * ci + i) * k * k..(o * ci + i + 1) * k * k];
                for_each_tap(h, w, k, |t, d0, d1, s0| {
                    axpy(taps[t], &src[s0..s0 + (d1 - d0)], &mut dst[d0..d1]);
                });
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (n, ci, h, w, co, k) = conv_dims(x, weight)?;
    if grad_out.shape() != [n, co, h, w] {
        return Err(Error::Shape(format!("conv output gradient {:?}", grad_out.shape())));
    }
    let plane = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[co]);
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    {
        let gxd = gx.data_mut();
        for b in 0..n {
            for i in 0..ci {
                let dst = &mut gxd[(b * ci + i) * plane..(b * ci + i + 1) * plane];
                for o in 0..co {
                    let g = &gd[(b * co + o) * plane..(b * co + o + 1) * plane];
                    let taps = &wd[(o * ci + i) * k * k..(o * ci + i + 1) * k * k];
                    for_each_tap(h, w, k, |t, d0, d1, s0| {
                        axpy(taps[t], &g[d0..d1], &mut dst[s0..s0 + (d1 - d0)]);
                    });
                }
            }
        }
    }
    {
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for b in 0..n {
            for o in 0..co {
                let g = &gd[(b * co + o) * plane..(b * co + o + 1) * plane];
                gbd[o] += g.iter().sum::<f64>();
                for i in 0..ci {
                    let src = &xd[(b * ci + i) * plane..(b * ci + i + 1) * plane];
                    let taps = &mut gwd[(o * ci + i) * k * k..(o * ci + i + 1) * k * k];
                    for_each_tap(h, w, k, |t, d0, d1, s0| {
                        taps[t] += dot(&g[d0..d1], &src[s0..s0 + (d1 - d0)]);
                    });
                }
            }
        }
    }
    Ok(ConvGrads { input: gx, weight: gw, bias: gb })
}

/// Saved state of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
}

fn per_channel(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    Ok((n, c, h * w))
}

/// Batch norm using batch statistics over `(N, H, W)`.
pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<(Tensor, BnCache)> {
    let (n, c, plane) = per_channel(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("batch norm has {} channels, input {c}", gamma.len())));
    }
    let count = (n * plane) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .map(|t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    {
        let (hd, yd) = (xhat.data_mut(), y.data_mut());
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for j in r {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    hd[j] = xh;
                    yd[j] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    Ok((y, BnCache { xhat, inv_std, mean, var }))
}

pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, plane) = per_channel(x)?;
    if gamma.len() != c {
        return Err(Error::Shape(format!("batch norm has {} channels, input {c}", gamma.len())));
    }
    let mut y = x.clone();
    let yd = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
            let shift = beta[ch] - running_mean[ch] * scale;
            for v in &mut yd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Returns `(d input, d gamma, d beta)`.
pub fn batchnorm_backward(grad_out: &Tensor, cache: &BnCache, gamma: &[f64]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, plane) = per_channel(grad_out)?;
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::Shape("batch norm gradient shape".into()));
    }
    let count = (n * plane) as f64;
    let (gd, hd) = (grad_out.data(), cache.xhat.data());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            gbeta[ch] += gd[r.clone()].iter().sum::<f64>();
            ggamma[ch] += dot(&gd[r.clone()], &hd[r]);
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    let gxd = gx.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / count;
            for j in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                gxd[j] = k * (count * gd[j] - gbeta[ch] - hd[j] * ggamma[ch]);
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.max(0.0);
    }
    y
}

/// Gradient of ReLU given its output (zero where the output is zero).
pub fn relu_backward(grad_out: &Tensor, out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// 2x2 max pooling, stride 2. Returns the output and the flat input index
/// of each selected element (first maximum in scan order).
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = p * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                od[o] = xd[best];
                idx[o] = best;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2_backward(grad_out: &Tensor, idx: &[usize], input_shape: &[usize]) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in idx.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    g
}

/// Source index pairs and weights for 2x bilinear upsampling with
/// half-pixel centres and edge clamping.
fn bilinear_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = match input_shape[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Shape("upsample input must be NCHW".into())),
    };
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::Shape(format!("upsample gradient {:?}", grad_out.shape())));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    let god = grad_out.data();
    for p in 0..n * c {
        let src = &god[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                dst[y1 * w + x0] += v * ly * (1.0 - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    Ok(g)
}

/// Channel concatenation of NCHW tensors with equal `N, H, W`.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let (n, _, h, w) = xs.first().ok_or_else(|| Error::Shape("empty concat".into()))?.dims4()?;
    let mut total_c = 0;
    for x in xs {
        let (n2, c, h2, w2) = x.dims4()?;
        if (n2, h2, w2) != (n, h, w) {
            return Err(Error::Shape(format!("concat of {:?} with {:?}", xs[0].shape(), x.shape())));
        }
        total_c += c;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for x in xs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], data)
}

pub fn concat_channels_backward(grad_out: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = grad_out.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::Shape("concat gradient channel count".into()));
    }
    let plane = h * w;
    let gd = grad_out.data();
    let mut outs: Vec<Vec<f64>> = channels.iter().map(|&ch| Vec::with_capacity(n * ch * plane)).collect();
    for b in 0..n {
        let mut off = b * c * plane;
        for (o, &ch) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&gd[off..off + ch * plane]);
            off += ch * plane;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &ch)| Tensor::new(vec![n, ch, h, w], d))
        .collect()
}

/// `y = x W^T + b` over the flattened trailing dims of `x`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = *x.shape().first().ok_or_else(|| Error::Shape("dense input is empty".into()))?;
    let f = x.len() / n.max(1);
    let (o, fi) = match weight.shape()[..] {
        [o, fi] => (o, fi),
        _ => return Err(Error::Shape(format!("bad dense weight {:?}", weight.shape()))),
    };
    if fi != f || bias.len() != o {
        return Err(Error::Shape(format!("dense expects {fi} features, got {f}")));
    }
    let mut out = Tensor::zeros(&[n, o]);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let od = out.data_mut();
    for b in 0..n {
        let row = &xd[b * f..(b + 1) * f];
        for j in 0..o {
            od[b * o + j] = bd[j] + dot(row, &wd[j * f..(j + 1) * f]);
        }
    }
    Ok(out)
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let n = x.shape()[0];
    let f = x.len() / n.max(1);
    let o = weight.shape()[0];
    if grad_out.shape() != [n, o] {
        return Err(Error::Shape(format!("dense output gradient {:?}", grad_out.shape())));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[o]);
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    for b in 0..n {
        let row = &xd[b * f..(b + 1) * f];
        for j in 0..o {
            let g = gd[b * o + j];
            gb.data_mut()[j] += g;
            axpy(g, &wd[j * f..(j + 1) * f], &mut gx.data_mut()[b * f..(b + 1) * f]);
            axpy(g, row, &mut gw.data_mut()[j * f..(j + 1) * f]);
        }
    }
    Ok(DenseGrads { input: gx, weight: gw, bias: gb })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_example() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = t(&[1, 1, 3, 4], &(0..12).map(|v| v as f64 - 3.5).collect::<Vec<_>>());
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = t(&[1, 2, 3, 3], &(0..18).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>());
        let w = t(&[1, 2, 3, 3], &(0..18).map(|v| (v as f64 * 0.91).cos()).collect::<Vec<_>>());
        let y = conv2d(&x, &w, &t(&[1], &[0.25])).unwrap();
        for oy in 0..3i32 {
            for ox in 0..3i32 {
                let mut s = 0.25;
                for c in 0..2 {
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                            if (0..3).contains(&iy) && (0..3).contains(&ix) {
                                s += x.data()[(c * 9 + iy * 3 + ix) as usize]
                                    * w.data()[(c * 9 + ky * 3 + kx) as usize];
                            }
                        }
                    }
                }
                assert!((y.data()[(oy * 3 + ox) as usize] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_example() {
        let (y, idx) = maxpool2(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        assert!(maxpool2(&Tensor::zeros(&[1, 1, 3, 2])).is_err());
    }

    #[test]
    fn upsample_constant_and_edges() {
        let y = upsample2(&Tensor::full(&[1, 2, 3, 3], 1.5)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 1.5));
        // 1-D ramp [0, 1] -> [0, 0.25, 0.75, 1]
        let y = upsample2(&t(&[1, 1, 1, 2], &[0.0, 1.0])).unwrap();
        assert_eq!(y.data()[..4], [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn concat_roundtrip() {
        let a = t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let parts = concat_channels_backward(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn dense_linear_map_gradient() {
        let x = t(&[1, 3], &[1.0, -2.0, 0.5]);
        let w = t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let y = dense(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert!((y.data()[0] - (0.1 - 0.4 + 0.15)).abs() < 1e-15);
        // loss = sum(y) -> dW rows equal x
        let g = dense_backward(&x, &w, &Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(g.weight.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
        assert_eq!(g.bias.data(), &[1.0, 1.0]);
    }

    #[test]
    fn batchnorm_normalises() {
        let x = t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, cache) = batchnorm_train(&x, &[1.0], &[0.0], 0.0).unwrap();
        assert!((y.sum()).abs() < 1e-12);
        assert_eq!(cache.mean, vec![2.5]);
        assert_eq!(cache.var, vec![1.25]);
        let e = batchnorm_eval(&x, &[2.0], &[1.0], &[2.5], &[1.25], 0.0).unwrap();
        for (a, b) in e.data().iter().zip(y.data()) {
            assert!((a - (2.0 * b + 1.0)).abs() < 1e-12);
        }
    }
}

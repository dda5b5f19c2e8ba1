//! Stateless forward and backward kernels.
//!
//! Every backward function takes the tensors saved from its forward pass
//! and returns exact gradients; parameter gradients are returned rather
//! than accumulated so callers decide where they go.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

fn conv_out_extent(op: &'static str, axis: &str, extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::dim(
            op,
            axis,
            format!("extent {extent} with pad {pad} is not tiled by kernel {k} at stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Geometry shared by the convolution forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, Self)> {
        let (n, cin, h, w) = input.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = weights.dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::dim(
                "conv2d",
                "channels",
                format!("input has {cin} channels but weights expect {wcin}"),
            ));
        }
        if !matches!(kh, 1 | 3) {
            return Err(Error::dim("conv2d", "kernel height", format!("unsupported kernel height {kh}")));
        }
        if !matches!(kw, 1 | 3) {
            return Err(Error::dim("conv2d", "kernel width", format!("unsupported kernel width {kw}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride", "stride must be positive"));
        }
        let oh = conv_out_extent("conv2d", "height", h, kh, stride, pad)?;
        let ow = conv_out_extent("conv2d", "width", w, kw, stride, pad)?;
        Ok((n, ConvGeometry { cin, h, w, cout, kh, kw, stride, pad, oh, ow }))
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1 stride-1 unpadded convolutions read the input directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let spatial = self.out_spatial();
        for ci in 0..self.cin {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (ci * self.kh + dy) * self.kw + dx;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::ZERO);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { T::ZERO } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx_out: &mut [T]) {
        let spatial = self.out_spatial();
        dx_out.fill(T::ZERO);
        for ci in 0..self.cin {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (ci * self.kh + dy) * self.kw + dx;
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx_out[base + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation without bias. `input` is `[N, Cin, H, W]`, `weights`
/// is `[Cout, Cin, kh, kw]` with `kh, kw` in `{1, 3}`.
pub fn conv2d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, g) = ConvGeometry::new(input, weights, stride, pad)?;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.out_spatial();
    let mut out = vec![T::ZERO; n * out_per];
    let w = weights.data();
    out.par_chunks_mut(out_per.max(1))
        .zip(input.data().par_chunks(in_per.max(1)))
        .for_each_init(
            || Vec::new(),
            |cols, (y, x)| {
                let b: &[T] = if g.is_pointwise() {
                    x
                } else {
                    cols.resize(g.patch() * g.out_spatial(), T::ZERO);
                    g.im2col(x, cols);
                    cols
                };
                gemm(g.cout, g.patch(), g.out_spatial(), w, false, b, false, T::ZERO, y);
            },
        );
    Tensor::new(vec![n, g.cout, g.oh, g.ow], out)
}

/// Returns `(grad_input, grad_weights)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, g) = ConvGeometry::new(input, weights, stride, pad)?;
    if grad_out.shape() != [n, g.cout, g.oh, g.ow] {
        return Err(Error::dim(
            "conv2d_backward",
            "grad",
            format!("gradient shape {:?} does not match output [{n}, {}, {}, {}]", grad_out.shape(), g.cout, g.oh, g.ow),
        ));
    }
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.out_spatial();
    let wlen = weights.len();
    let w = weights.data();
    let mut grad_in = vec![T::ZERO; n * in_per];
    // Per-sample weight gradients, reduced below in sample order so the
    // result does not depend on the thread count.
    let partials: Vec<Vec<T>> = grad_in
        .par_chunks_mut(in_per.max(1))
        .zip(input.data().par_chunks(in_per.max(1)))
        .zip(grad_out.data().par_chunks(out_per.max(1)))
        .map(|((gx, x), gy)| {
            let mut gw = vec![T::ZERO; wlen];
            if g.is_pointwise() {
                gemm(g.cout, g.out_spatial(), g.patch(), gy, false, x, true, T::ZERO, &mut gw);
                gemm(g.patch(), g.cout, g.out_spatial(), w, true, gy, false, T::ZERO, gx);
            } else {
                let mut cols = vec![T::ZERO; g.patch() * g.out_spatial()];
                g.im2col(x, &mut cols);
                gemm(g.cout, g.out_spatial(), g.patch(), gy, false, &cols, true, T::ZERO, &mut gw);
                gemm(g.patch(), g.cout, g.out_spatial(), w, true, gy, false, T::ZERO, &mut cols);
                g.col2im(&cols, gx);
            }
            gw
        })
        .collect();
    let mut grad_w = vec![T::ZERO; wlen];
    for p in &partials {
        for (acc, &v) in grad_w.iter_mut().zip(p) {
            *acc += v;
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), grad_in)?,
        Tensor::new(weights.shape().to_vec(), grad_w)?,
    ))
}

/// Batch, channel and per-channel extent of a `[N, C]` or `[N, C, H, W]` tensor.
fn channel_layout<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::dim(op, "rank", format!("expected 2 or 4 axes, got {:?}", x.shape()))),
    }
}

/// Saved state of a training-mode batch normalisation.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode batch normalisation with biased batch variance.
/// Returns the output, the cache, and the batch `(mean, var)` per channel.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>, Vec<T>, Vec<T>)> {
    let (n, c, s) = channel_layout("batch_norm", x)?;
    if n < 2 {
        return Err(Error::InvalidBatch {
            op: "batch_norm",
            detail: format!("training mode needs at least 2 samples, got {n}"),
        });
    }
    check_channels("batch_norm", c, gamma.len())?;
    let m = T::from_f64((n * s) as f64);
    let data = x.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut acc = T::ZERO;
        for i in 0..n {
            acc += data[(i * c + ch) * s..][..s].iter().copied().sum::<T>();
        }
        let mu = acc / m;
        let mut sq = T::ZERO;
        for i in 0..n {
            for &v in &data[(i * c + ch) * s..][..s] {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::ZERO; data.len()];
    let mut out = vec![T::ZERO; data.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            for j in base..base + s {
                let xhat = (data[j] - mean[ch]) * inv_std[ch];
                normalized[j] = xhat;
                out[j] = gamma[ch] * xhat + beta[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BatchNormCache {
            normalized: Tensor::new(shape, normalized)?,
            inv_std,
        },
        mean,
        var,
    ))
}

pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, s) = channel_layout("batch_norm", x)?;
    check_channels("batch_norm", c, gamma.len())?;
    let data = x.data();
    let mut out = vec![T::ZERO; data.len()];
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for i in 0..n {
            let base = (i * c + ch) * s;
            for j in base..base + s {
                out[j] = data[j] * scale + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, s) = channel_layout("batch_norm_backward", grad_out)?;
    let xhat = cache.normalized.data();
    let dy = grad_out.data();
    let m = T::from_f64((n * s) as f64);
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            for j in base..base + s {
                dgamma[ch] += dy[j] * xhat[j];
                dbeta[ch] += dy[j];
            }
        }
    }
    let mut dx = vec![T::ZERO; dy.len()];
    for ch in 0..c {
        // dx = inv_std * gamma / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
        let k = cache.inv_std[ch] * gamma[ch] / m;
        for i in 0..n {
            let base = (i * c + ch) * s;
            for j in base..base + s {
                dx[j] = k * (m * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
            }
        }
    }
    Ok((Tensor::new(grad_out.shape().to_vec(), dx)?, dgamma, dbeta))
}

fn check_channels(op: &'static str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::dim(
            op,
            "channels",
            format!("input has {got} channels, parameters have {expected}"),
        ));
    }
    Ok(())
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradient through ReLU given its forward output; zero where the output
/// is zero (subgradient 0 at the kink).
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data).expect("same shape")
}

/// Non-overlapping 2x2 mean pooling.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("avg_pool2")?;
    if h % 2 != 0 {
        return Err(Error::dim("avg_pool2", "height", format!("height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::dim("avg_pool2", "width", format!("width {w} is odd")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let src = x.data();
    let mut out = vec![T::ZERO; n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..][..h * w];
        let d = &mut out[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let r0 = &s[2 * oy * w..][..w];
            let r1 = &s[(2 * oy + 1) * w..][..w];
            for ox in 0..ow {
                d[oy * ow + ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad_out.dims4("avg_pool2_backward")?;
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::from_f64(0.25);
    let g = grad_out.data();
    let mut out = vec![T::ZERO; n * c * h * w];
    for plane in 0..n * c {
        let gs = &g[plane * oh * ow..][..oh * ow];
        let d = &mut out[plane * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = gs[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Per-channel spatial mean, `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    if h == 0 || w == 0 {
        return Err(Error::dim("global_avg_pool", "spatial", "empty feature map"));
    }
    let s = h * w;
    let scale = T::from_f64(1.0 / s as f64);
    let out = x.data().chunks(s).map(|plane| plane.iter().copied().sum::<T>() * scale).collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = grad_out.dims2("global_avg_pool_backward")?;
    let s = h * w;
    let scale = T::from_f64(1.0 / s as f64);
    let mut out = Vec::with_capacity(n * c * s);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * scale, s));
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// `y = x W^T + b` with `x: [N, F]`, `W: [K, F]`, `b: [K]`.
pub fn linear<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = x.dims2("linear")?;
    let (k, wf) = weights.dims2("linear")?;
    if wf != f {
        return Err(Error::dim("linear", "features", format!("input has {f} features, weights expect {wf}")));
    }
    if bias.shape() != [k] {
        return Err(Error::dim("linear", "bias", format!("bias shape {:?}, expected [{k}]", bias.shape())));
    }
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, f, k, x.data(), false, weights.data(), true, T::ONE, &mut out);
    Tensor::new(vec![n, k], out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f) = x.dims2("linear_backward")?;
    let (k, _) = weights.dims2("linear_backward")?;
    if grad_out.shape() != [n, k] {
        return Err(Error::dim("linear_backward", "grad", format!("gradient shape {:?}, expected [{n}, {k}]", grad_out.shape())));
    }
    let mut dx = vec![T::ZERO; n * f];
    gemm(n, k, f, grad_out.data(), false, weights.data(), false, T::ZERO, &mut dx);
    let mut dw = vec![T::ZERO; k * f];
    gemm(k, n, f, grad_out.data(), true, x.data(), false, T::ZERO, &mut dw);
    let mut db = vec![T::ZERO; k];
    for row in grad_out.data().chunks(k) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((
        Tensor::new(vec![n, f], dx)?,
        Tensor::new(vec![k, f], dw)?,
        Tensor::new(vec![k], db)?,
    ))
}

/// Concatenates `[N, Ci, H, W]` tensors along the channel axis in argument order.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "inputs", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total = 0;
    for (i, t) in inputs.iter().enumerate() {
        let (tn, tc, th, tw) = t.dims4("concat_channels")?;
        if tn != n {
            return Err(Error::dim("concat_channels", "batch", format!("input 0 has {n} samples, input {i} has {tn}")));
        }
        if (th, tw) != (h, w) {
            return Err(Error::dim(
                "concat_channels",
                "spatial",
                format!("input 0 is {h}x{w}, input {i} is {th}x{tw}"),
            ));
        }
        total += tc;
    }
    let s = h * w;
    let mut out = Vec::with_capacity(n * total * s);
    for i in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[i * c * s..(i + 1) * c * s]);
        }
    }
    Tensor::new(vec![n, total, h, w], out)
}

/// Splits a channel-concatenated gradient back into pieces of the given widths.
pub fn split_channels<T: Real>(grad: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (_, c, _, _) = grad.dims4("split_channels")?;
    let sum: usize = widths.iter().sum();
    if sum != c {
        return Err(Error::dim("split_channels", "channels", format!("widths sum to {sum}, tensor has {c}")));
    }
    let mut offset = 0;
    Ok(widths
        .iter()
        .map(|&wd| {
            let piece = grad.slice_channels(offset, wd);
            offset += wd;
            piece
        })
        .collect())
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k.max(1)) {
        let max = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        let mut z = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy over the batch and the softmax probabilities.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy", "batch", format!("{n} logit rows, {} labels", labels.len())));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label { label, classes: k, row });
        }
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].to_f64();
    }
    Ok((loss / n as f64, probs))
}

/// `(probs - onehot) / N`.
pub fn softmax_cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, k) = probs.dims2("softmax_cross_entropy_backward")?;
    let scale = T::from_f64(1.0 / n as f64);
    let mut g = probs.data().to_vec();
    for (row, &label) in g.chunks_mut(k).zip(labels) {
        row[label] -= T::ONE;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::new(vec![n, k], g)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-deep loop over (n, co, oy, ox, ci, ky, kx).
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, cin, h, wd) = x.dims4("t").unwrap();
        let (cout, _, kh, kw) = w.dims4("t").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_1x1() {
        let x = random(&[2, 3, 4, 4], 1);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_counts_neighbours() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = random(&[2, 3, 8, 8], 2);
        let w = random(&[4, 3, 3, 3], 3);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        let expected = naive_conv(&x, &w, 1, 1);
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
        }
        // strided, unpadded
        let x = random(&[2, 3, 7, 7], 6);
        let y = conv2d(&x, &w, 2, 0).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        let expected = naive_conv(&x, &w, 2, 0);
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let x = random(&[1, 3, 4, 4], 0);
        let w = random(&[2, 4, 3, 3], 0);
        let err = conv2d(&x, &w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let w = random(&[2, 3, 5, 3], 0);
        let err = conv2d(&x, &w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("kernel height"), "{err}");
        let w = random(&[2, 3, 3, 3], 0);
        let err = conv2d(&random(&[1, 3, 5, 4], 0), &w, 2, 0).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn conv_preserves_spatial_dims() {
        let x = random(&[1, 2, 6, 10], 4);
        assert_eq!(conv2d(&x, &random(&[3, 2, 3, 3], 5), 1, 1).unwrap().shape(), &[1, 3, 6, 10]);
        assert_eq!(conv2d(&x, &random(&[3, 2, 1, 1], 5), 1, 0).unwrap().shape(), &[1, 3, 6, 10]);
    }

    #[test]
    fn batch_norm_hand_values() {
        let x = Tensor::<f64>::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _, mean, var) = batch_norm_train(&x, &[1.0], &[0.0], 1e-12).unwrap();
        assert_eq!(mean, vec![2.5]);
        assert_eq!(var, vec![1.25]);
        for (a, b) in y.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_constant_input_gives_beta() {
        let x = Tensor::<f64>::full(&[3, 2, 2, 2], 5.0);
        let (y, ..) = batch_norm_train(&x, &[3.0, -2.0], &[0.5, 0.25], 1e-5).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(*v, [0.5, 0.25][ch]);
        }
    }

    #[test]
    fn batch_norm_whitened_input_is_identity() {
        let x = Tensor::<f64>::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, ..) = batch_norm_train(&x, &[1.0], &[0.0], 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample() {
        let x = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0);
        assert!(matches!(
            batch_norm_train(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5),
            Err(Error::InvalidBatch { .. })
        ));
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::<f64>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::<f64>::full(&[4], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = random(&[8], 9);
        let pos = Tensor::new(vec![8], pos.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
        assert_eq!(relu(&pos), pos);
        let g = Tensor::full(&[3], 1.0);
        assert_eq!(relu_backward(&relu(&x), &g).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn avg_pool_cases() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
        let ramp = Tensor::<f64>::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(avg_pool2(&ramp).unwrap().data(), &[2.5, 4.5, 10.5, 12.5]);
        let c = Tensor::<f64>::full(&[2, 3, 4, 6], 7.0);
        let p = avg_pool2(&c).unwrap();
        assert_eq!(p.shape(), &[2, 3, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 7.0));
        let odd = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(avg_pool2(&odd).unwrap_err().to_string().contains("height"));
        let g = avg_pool2_backward(&Tensor::<f64>::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn global_pool_cases() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let one = random(&[2, 3, 1, 1], 3);
        assert_eq!(global_avg_pool(&one).unwrap().data(), one.data());
        let c = Tensor::<f64>::full(&[2, 2, 3, 3], 1.5);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[11.5, 16.5]);

        let x = random(&[3, 4], 1);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        let b = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[2, 4]), &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
        assert!(linear(&x, &Tensor::zeros(&[2, 3]), &b).is_err());
    }

    #[test]
    fn concat_cases() {
        let a = random(&[2, 3, 2, 2], 1);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let b = random(&[2, 24, 1, 1], 2);
        let c = random(&[2, 24, 1, 1], 3);
        let bc = concat_channels(&[&b, &c]).unwrap();
        assert_eq!(bc.shape(), &[2, 48, 1, 1]);
        let parts = split_channels(&bc, &[24, 24]).unwrap();
        assert_eq!(parts[0], b);
        assert_eq!(parts[1], c);
        let bad = random(&[2, 3, 4, 2], 1);
        let err = concat_channels(&[&a, &bad]).unwrap_err().to_string();
        assert!(err.contains("input 0") && err.contains("input 1"), "{err}");
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::<f64>::zeros(&[3, 100]);
        let (loss, probs) = softmax_cross_entropy(&uniform, &[0, 5, 99]).unwrap();
        assert!((loss - 100f64.ln()).abs() < 1e-12);
        for row in probs.data().chunks(100) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut confident = Tensor::<f64>::zeros(&[1, 4]);
        confident.data_mut()[2] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&confident, &[2]).unwrap();
        assert!(loss.abs() < 1e-12);
        let l = Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[2]).unwrap();
        assert!((loss - 0.40761).abs() < 1e-4, "{loss}");
        assert!(matches!(softmax_cross_entropy(&l, &[3]), Err(Error::Label { label: 3, .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 5]), 0);
    }
}

//! Layer kernels with hand-written backward passes.
//!
//! Every forward here owns an exact analytic backward; the finite-difference
//! checker in [`crate::nn::gradcheck`] is the oracle that keeps them honest.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Train/infer switch shared by dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    None,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// conv2d: stride-1 cross-correlation with zero padding, no bias
// ---------------------------------------------------------------------------

/// `input` is C_in x H x W, `kernels` C_out x C_in x kh x kw, `pad` is
/// (pad_h, pad_w) applied on both sides. Output is C_out x H' x W' with
/// H' = H + 2*pad_h - kh + 1.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, pad: (usize, usize)) -> Result<Tensor> {
    let (c_in, h, w) = dims3(input, "conv2d input")?;
    let (c_out, kc, kh, kw) = dims4(kernels, "conv2d kernels")?;
    if kc != c_in {
        return Err(Error::shape(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    let (ph, pw) = pad;
    let h_pad = h + 2 * ph;
    let w_pad = w + 2 * pw;
    if kh > h_pad || kw > w_pad {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} larger than padded input {h_pad}x{w_pad}"
        )));
    }
    let h_out = h_pad - kh + 1;
    let w_out = w_pad - kw + 1;
    let mut out = Tensor::zeros(&[c_out, h_out, w_out]);
    let idata = input.data();
    let kdata = kernels.data();
    let odata = out.data_mut();
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * kh * kw;
            let ibase = ci * h * w;
            for u in 0..kh {
                for v in 0..kw {
                    let k = kdata[kbase + u * kw + v];
                    if k == 0.0 {
                        continue;
                    }
                    // output (i,j) reads padded input (i+u, j+v); translate
                    // to unpadded coordinates and walk the valid range.
                    for i in 0..h_out {
                        let y = (i + u) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let irow = ibase + y as usize * w;
                        let orow = (co * h_out + i) * w_out;
                        for j in 0..w_out {
                            let x = (j + v) as isize - pw as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            odata[orow + j] += k * idata[irow + x as usize];
                        }
                    }
                }
            }
        }
    }
    out.assert_finite("conv2d output")?;
    Ok(out)
}

/// Gradients of the convolution w.r.t. input and kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    pad: (usize, usize),
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c_in, h, w) = dims3(input, "conv2d input")?;
    let (c_out, _, kh, kw) = dims4(kernels, "conv2d kernels")?;
    let (ph, pw) = pad;
    let h_out = h + 2 * ph - kh + 1;
    let w_out = w + 2 * pw - kw + 1;
    if grad_out.shape() != [c_out, h_out, w_out] {
        return Err(Error::shape(format!(
            "conv2d grad_out has shape {:?}, expected {:?}",
            grad_out.shape(),
            [c_out, h_out, w_out]
        )));
    }
    let mut grad_input = Tensor::zeros(&[c_in, h, w]);
    let mut grad_kernels = Tensor::zeros(kernels.shape());
    let idata = input.data();
    let kdata = kernels.data();
    let gdata = grad_out.data();
    let gi = grad_input.data_mut();
    let gk = grad_kernels.data_mut();
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * kh * kw;
            let ibase = ci * h * w;
            for u in 0..kh {
                for v in 0..kw {
                    let k = kdata[kbase + u * kw + v];
                    let mut dk = 0.0;
                    for i in 0..h_out {
                        let y = (i + u) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let irow = ibase + y as usize * w;
                        let orow = (co * h_out + i) * w_out;
                        for j in 0..w_out {
                            let x = (j + v) as isize - pw as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let g = gdata[orow + j];
                            dk += g * idata[irow + x as usize];
                            gi[irow + x as usize] += g * k;
                        }
                    }
                    gk[kbase + u * kw + v] += dk;
                }
            }
        }
    }
    Ok((grad_input, grad_kernels))
}

// ---------------------------------------------------------------------------
// max pooling along the feature axis, stride 1
// ---------------------------------------------------------------------------

/// Sliding max of height `pool_h` down the feature axis of an F x T map.
/// Returns the (F - pool_h + 1) x T output and the argmax row per output
/// cell (ties take the lowest row).
pub fn maxpool_feature_forward(input: &Tensor, pool_h: usize) -> Result<(Tensor, Vec<u32>)> {
    let (f, t) = dims2(input, "maxpool input")?;
    if f < pool_h {
        return Err(Error::shape(format!(
            "feature axis {f} shorter than pool height {pool_h}"
        )));
    }
    let f_out = f - pool_h + 1;
    let mut out = Tensor::zeros(&[f_out, t]);
    let mut argmax = vec![0u32; f_out * t];
    let idata = input.data();
    let odata = out.data_mut();
    for j in 0..t {
        for i in 0..f_out {
            let mut best = f64::NEG_INFINITY;
            let mut best_row = i;
            for r in i..i + pool_h {
                let v = idata[r * t + j];
                if v > best {
                    best = v;
                    best_row = r;
                }
            }
            odata[i * t + j] = best;
            argmax[i * t + j] = best_row as u32;
        }
    }
    Ok((out, argmax))
}

/// Route output gradients back to the argmax rows.
pub fn maxpool_feature_backward(
    input_shape: (usize, usize),
    pool_h: usize,
    argmax: &[u32],
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (f, t) = input_shape;
    let f_out = f - pool_h + 1;
    if grad_out.shape() != [f_out, t] {
        return Err(Error::shape("maxpool grad_out shape"));
    }
    let mut grad_input = Tensor::zeros(&[f, t]);
    let gi = grad_input.data_mut();
    let g = grad_out.data();
    for i in 0..f_out {
        for j in 0..t {
            let r = argmax[i * t + j] as usize;
            gi[r * t + j] += g[i * t + j];
        }
    }
    Ok(grad_input)
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

/// Backward through ReLU given the pre-activation input.
pub fn relu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(pre.shape(), grad_out.shape());
    let mut grad = grad_out.clone();
    for (g, p) in grad.data_mut().iter_mut().zip(pre.data().iter()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// dense (affine) layer, batched over rows
// ---------------------------------------------------------------------------

/// `input` N x D, `weights` H x D, `bias` H; output N x H with the optional
/// activation applied.
pub fn dense_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    activation: Activation,
) -> Result<Tensor> {
    let (n, d) = dims2(input, "dense input")?;
    let (h, wd) = dims2(weights, "dense weights")?;
    if wd != d || bias.shape() != [h] {
        return Err(Error::shape(format!(
            "dense: input {:?} weights {:?} bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, h]);
    for row in 0..n {
        let x = input.row(row);
        let o = out.row_mut(row);
        for (i, oi) in o.iter_mut().enumerate() {
            let wrow = weights.row(i);
            let mut acc = bias.data()[i];
            for (wv, xv) in wrow.iter().zip(x.iter()) {
                acc += wv * xv;
            }
            *oi = match activation {
                Activation::Sigmoid => sigmoid(acc),
                Activation::None => acc,
            };
        }
    }
    out.assert_finite("dense output")?;
    Ok(out)
}

/// Backward through the dense layer. `output` must be the forward result
/// (used to form the sigmoid derivative). Returns (grad_input, grad_weights,
/// grad_bias).
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    output: &Tensor,
    activation: Activation,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = dims2(input, "dense input")?;
    let (h, _) = dims2(weights, "dense weights")?;
    if grad_out.shape() != [n, h] {
        return Err(Error::shape("dense grad_out shape"));
    }
    let mut grad_input = Tensor::zeros(&[n, d]);
    let mut grad_w = Tensor::zeros(weights.shape());
    let mut grad_b = Tensor::zeros(&[h]);
    for row in 0..n {
        let x = input.row(row);
        let go = grad_out.row(row);
        let y = output.row(row);
        let gi = grad_input.row_mut(row);
        for i in 0..h {
            let dpre = match activation {
                Activation::Sigmoid => go[i] * y[i] * (1.0 - y[i]),
                Activation::None => go[i],
            };
            if dpre == 0.0 {
                continue;
            }
            grad_b.data_mut()[i] += dpre;
            let wrow = weights.row(i);
            let gw = grad_w.row_mut(i);
            for j in 0..d {
                gw[j] += dpre * x[j];
                gi[j] += dpre * wrow[j];
            }
        }
    }
    Ok((grad_input, grad_w, grad_b))
}

// ---------------------------------------------------------------------------
// batch normalization over the batch axis of an N x D matrix
// ---------------------------------------------------------------------------

pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Train mode normalizes with batch statistics (population variance,
/// epsilon inside the square root) and, when `update_running` is set, folds
/// them into the running buffers; infer mode normalizes with the running
/// statistics. Returns the cache needed by the backward pass in train mode.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    mode: Mode,
    momentum: f64,
    eps: f64,
    update_running: bool,
) -> Result<(Tensor, Option<BatchNormCache>)> {
    let (n, d) = dims2(x, "batch_norm input")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("batch_norm parameter shapes"));
    }
    match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::validation(format!(
                    "batch_norm train mode needs a batch of at least 2, got {n}"
                )));
            }
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for row in 0..n {
                for (m, v) in mean.iter_mut().zip(x.row(row)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for row in 0..n {
                for j in 0..d {
                    let c = x.row(row)[j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = Tensor::zeros(&[n, d]);
            let mut out = Tensor::zeros(&[n, d]);
            for row in 0..n {
                for j in 0..d {
                    let xh = (x.row(row)[j] - mean[j]) * inv_std[j];
                    xhat.row_mut(row)[j] = xh;
                    out.row_mut(row)[j] = gamma.data()[j] * xh + beta.data()[j];
                }
            }
            if update_running {
                for j in 0..d {
                    let rm = running_mean.data_mut();
                    rm[j] = momentum * rm[j] + (1.0 - momentum) * mean[j];
                    let rv = running_var.data_mut();
                    rv[j] = momentum * rv[j] + (1.0 - momentum) * var[j];
                }
            }
            out.assert_finite("batch_norm output")?;
            Ok((out, Some(BatchNormCache { xhat, inv_std })))
        }
        Mode::Infer => {
            let mut out = Tensor::zeros(&[n, d]);
            for row in 0..n {
                for j in 0..d {
                    let inv = 1.0 / (running_var.data()[j] + eps).sqrt();
                    let xh = (x.row(row)[j] - running_mean.data()[j]) * inv;
                    out.row_mut(row)[j] = gamma.data()[j] * xh + beta.data()[j];
                }
            }
            out.assert_finite("batch_norm output")?;
            Ok((out, None))
        }
    }
}

/// Full backward through train-mode normalization (mean and variance both
/// depend on the input). Returns (grad_x, grad_gamma, grad_beta).
pub fn batch_norm_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = dims2(&cache.xhat, "batch_norm cache")?;
    if grad_out.shape() != [n, d] {
        return Err(Error::shape("batch_norm grad_out shape"));
    }
    let mut grad_gamma = Tensor::zeros(&[d]);
    let mut grad_beta = Tensor::zeros(&[d]);
    let mut sum_dxhat = vec![0.0; d];
    let mut sum_dxhat_xhat = vec![0.0; d];
    for row in 0..n {
        let go = grad_out.row(row);
        let xh = cache.xhat.row(row);
        for j in 0..d {
            grad_gamma.data_mut()[j] += go[j] * xh[j];
            grad_beta.data_mut()[j] += go[j];
            let dxh = go[j] * gamma.data()[j];
            sum_dxhat[j] += dxh;
            sum_dxhat_xhat[j] += dxh * xh[j];
        }
    }
    let mut grad_x = Tensor::zeros(&[n, d]);
    for row in 0..n {
        let go = grad_out.row(row);
        let xh = cache.xhat.row(row);
        let gx = grad_x.row_mut(row);
        for j in 0..d {
            let dxh = go[j] * gamma.data()[j];
            gx[j] = cache.inv_std[j] / n as f64
                * (n as f64 * dxh - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j]);
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}

// ---------------------------------------------------------------------------
// dropout (inverted: survivors scaled at train time)
// ---------------------------------------------------------------------------

/// Train mode zeroes each unit with probability `p` and scales survivors by
/// 1/(1-p); infer mode is the identity. The mask is drawn from a ChaCha
/// stream seeded with `seed`, so a fixed seed gives a fixed mask.
pub fn dropout_forward(
    x: &Tensor,
    p: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor, Option<Vec<bool>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::validation(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    match mode {
        Mode::Infer => Ok((x.clone(), None)),
        Mode::Train => {
            if p == 0.0 {
                return Ok((x.clone(), Some(vec![true; x.len()])));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (1.0 - p);
            let mut out = x.clone();
            let mut mask = vec![false; x.len()];
            for (v, m) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
                if rng.gen::<f64>() < p {
                    *v = 0.0;
                } else {
                    *v *= scale;
                    *m = true;
                }
            }
            Ok((out, Some(mask)))
        }
    }
}

pub fn dropout_backward(mask: &[bool], p: f64, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(mask.len(), grad_out.len());
    let scale = 1.0 / (1.0 - p);
    let mut grad = grad_out.clone();
    for (g, keep) in grad.data_mut().iter_mut().zip(mask.iter()) {
        *g = if *keep { *g * scale } else { 0.0 };
    }
    grad
}

// ---------------------------------------------------------------------------
// softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Row-wise stabilized softmax of an N x C matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, _c) = dims2(logits, "softmax logits")?;
    let mut out = logits.clone();
    for row in 0..n {
        let r = out.row_mut(row);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
    out.assert_finite("softmax output")?;
    Ok(out)
}

/// Mean cross-entropy over the batch plus its gradient w.r.t. the logits:
/// (softmax - onehot) / N.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = dims2(logits, "cross-entropy logits")?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= c {
            return Err(Error::validation(format!(
                "label {l} out of range for {c} classes"
            )));
        }
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (row, &label) in labels.iter().enumerate() {
        let p = probs.row(row)[label];
        loss -= p.max(f64::MIN_POSITIVE).ln();
        grad.row_mut(row)[label] -= 1.0;
    }
    loss /= n as f64;
    for v in grad.data_mut() {
        *v /= n as f64;
    }
    if !loss.is_finite() {
        return Err(Error::numeric("cross-entropy loss is not finite"));
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// shape helpers
// ---------------------------------------------------------------------------

pub(crate) fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

pub(crate) fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(format!("{what} must be 3-D, got {s:?}"))),
    }
}

pub(crate) fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::shape(format!("{what} must be 4-D, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_scalar_case() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![-2.0]).unwrap();
        let y = conv2d_forward(&x, &k, (0, 0)).unwrap();
        assert_eq!(y.data(), &[-6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec(&[1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // centered 1 in a 3x3 kernel
        let k = Tensor::from_vec(&[1, 1, 3, 3], kdata).unwrap();
        let y = conv2d_forward(&x, &k, (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d_forward(&x, &k, (0, 0)).is_err());
    }

    #[test]
    fn maxpool_constant_column() {
        let x = Tensor::filled(&[8, 3], 2.5);
        let (y, _) = maxpool_feature_forward(&x, 8).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_monotone_column_takes_window_end() {
        let x = Tensor::from_vec(&[10, 1], (0..10).map(f64::from).collect()).unwrap();
        let (y, argmax) = maxpool_feature_forward(&x, 8).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        assert_eq!(y.data(), &[7.0, 8.0, 9.0]);
        assert_eq!(argmax, vec![7, 8, 9]);
    }

    #[test]
    fn maxpool_ties_take_lowest_row() {
        let x = Tensor::filled(&[9, 1], 1.0);
        let (_, argmax) = maxpool_feature_forward(&x, 8).unwrap();
        assert_eq!(argmax, vec![0, 1]);
    }

    #[test]
    fn maxpool_rejects_short_feature_axis() {
        let x = Tensor::zeros(&[7, 4]);
        assert!(maxpool_feature_forward(&x, 8).is_err());
    }

    #[test]
    fn dense_zero_weights_sigmoid_gives_half() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[3]);
        let y = dense_forward(&x, &w, &b, Activation::Sigmoid).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn dense_identity_weights_pass_through() {
        let x = Tensor::from_vec(&[1, 3], vec![1.5, -2.0, 0.25]).unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.set2(i, i, 1.0);
        }
        let b = Tensor::zeros(&[3]);
        let y = dense_forward(&x, &w, &b, Activation::None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batch_norm_zero_variance_returns_beta() {
        let x = Tensor::filled(&[4, 2], 7.0);
        let gamma = Tensor::filled(&[2], 3.0);
        let beta = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::filled(&[2], 1.0);
        let (y, _) = batch_norm_forward(
            &x, &gamma, &beta, &mut rm, &mut rv, Mode::Train, 0.99, 1e-5, true,
        )
        .unwrap();
        for row in 0..4 {
            assert!((y.at2(row, 0) - -1.0).abs() < 1e-9);
            assert!((y.at2(row, 1) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_standardized_input_passes_through() {
        // mean 0, population variance 1 per column
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::filled(&[2], 1.0);
        let (y, _) = batch_norm_forward(
            &x, &gamma, &beta, &mut rm, &mut rv, Mode::Train, 0.99, 1e-5, true,
        )
        .unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_rejects_single_row_training() {
        let x = Tensor::zeros(&[1, 2]);
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::filled(&[2], 1.0);
        assert!(batch_norm_forward(
            &x, &gamma, &beta, &mut rm, &mut rv, Mode::Train, 0.99, 1e-5, true
        )
        .is_err());
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, mask) = dropout_forward(&x, 0.0, Mode::Train, 9).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(mask.unwrap().iter().all(|&m| m));
    }

    #[test]
    fn dropout_infer_is_identity() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, mask) = dropout_forward(&x, 0.9, Mode::Infer, 9).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(mask.is_none());
    }

    #[test]
    fn dropout_rejects_p_one() {
        let x = Tensor::zeros(&[3]);
        assert!(dropout_forward(&x, 1.0, Mode::Train, 9).is_err());
    }

    #[test]
    fn dropout_mask_deterministic_and_binomial() {
        let x = Tensor::filled(&[10_000], 1.0);
        let (y1, m1) = dropout_forward(&x, 0.5, Mode::Train, 1234).unwrap();
        let (y2, m2) = dropout_forward(&x, 0.5, Mode::Train, 1234).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_eq!(m1, m2);
        let kept = m1.unwrap().iter().filter(|&&m| m).count() as f64;
        // 3 sigma of Binomial(1e4, 0.5): 3 * sqrt(1e4 * 0.25) = 150
        assert!((kept - 5000.0).abs() < 150.0, "kept {kept}");
        // survivors are scaled by 2
        assert!(y1.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        // (softmax - onehot)/N with N=2: 0.25/2 off-label, (0.25-1)/2 on-label
        assert!((grad.at2(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad.at2(0, 1) - 0.25 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_prediction() {
        let mut logits = Tensor::zeros(&[1, 3]);
        logits.set2(0, 1, 60.0);
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::Rng;
        let mut rng = crate::seeding::stream_rng(3, "softmax");
        let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let logits = Tensor::from_vec(&[12, 5], data).unwrap();
        let p = softmax(&logits).unwrap();
        for row in 0..12 {
            let s: f64 = p.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

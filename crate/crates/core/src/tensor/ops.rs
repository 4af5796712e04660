//! Forward and backward kernels. Every forward here has a matching
//! `*_backward` that maps an upstream gradient to input/parameter gradients.

use super::Tensor;
use crate::error::{Error, Result};

fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Range of output positions `o` for which `o * stride + k - pad` lands in `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k - pad < n
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad <= k {
        0
    } else {
        ((n + pad - k - 1) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

fn check_conv(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    let (k, wc, kh, kw) = match weight.shape()[..] {
        [k, wc, kh, kw] => (k, wc, kh, kw),
        _ => return Err(Error::Shape(format!("conv weight must be [K,C,kh,kw], got {:?}", weight.shape()))),
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "conv input has {c} channels but weights expect {wc}"
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::Shape(format!("conv bias must be [{k}], got {:?}", bias.shape())));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
    }
    Ok((c, h, w, k, kh, kw))
}

/// 2-D convolution with zero padding. Each output is the kernel/field dot
/// product accumulated over `(c, ki, kj)` in that order, plus the bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c, h, w, k, kh, kw) = check_conv(input, weight, bias, stride)?;
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let (oh, ow) = (out_len(h, kh, stride, pad), out_len(w, kw, stride, pad));
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; k * oh * ow];
    for ko in 0..k {
        let plane = &mut out[ko * oh * ow..(ko + 1) * oh * ow];
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                let (oy0, oy1) = valid_range(h, oh, stride, ki, pad);
                for kj in 0..kw {
                    let wv = wt[((ko * c + ci) * kh + ki) * kw + kj];
                    let (ox0, ox1) = valid_range(w, ow, stride, kj, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ki - pad;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox0 + kj - pad;
                            for (o, xi) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                                *o += wv * xi;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
        let b = bias.data()[ko];
        plane.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(vec![k, oh, ow], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = input.dims3()?;
    let (k, _, kh, kw) = match weight.shape()[..] {
        [k, wc, kh, kw] if wc == c => (k, wc, kh, kw),
        _ => return Err(Error::Shape("conv backward weight/input mismatch".into())),
    };
    let (oh, ow) = (out_len(h, kh, stride, pad), out_len(w, kw, stride, pad));
    if grad_out.shape() != [k, oh, ow] {
        return Err(Error::Shape(format!(
            "conv upstream gradient must be [{k},{oh},{ow}], got {:?}",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; k];
    for ko in 0..k {
        let gplane = &g[ko * oh * ow..(ko + 1) * oh * ow];
        gb[ko] = gplane.iter().sum();
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let gxin = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                let (oy0, oy1) = valid_range(h, oh, stride, ki, pad);
                for kj in 0..kw {
                    let widx = ((ko * c + ci) * kh + ki) * kw + kj;
                    let wv = wt[widx];
                    let (ox0, ox1) = valid_range(w, ow, stride, kj, pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ki - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kj - pad;
                            let gv = grow[ox];
                            acc += gv * xin[iy * w + ix];
                            gxin[iy * w + ix] += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![c, h, w], gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![k], gb)?,
    ))
}

/// Max pooling over `window x window` cells. Returns the pooled tensor and,
/// per output cell, the flat input index of its maximum (first on ties).
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window and stride must be >= 1".into()));
    }
    if window > h || window > w {
        return Err(Error::Shape(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    let (oh, ow) = (out_len(h, window, stride, 0), out_len(w, window, stride, 0));
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (ci * h + oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

/// Routes each output gradient entirely to its recorded argmax cell.
pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape("pool argmax and gradient lengths differ".into()));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(gx)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape("relu gradient shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

fn check_fc(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (m, n) = match weight.shape()[..] {
        [m, n] => (m, n),
        _ => return Err(Error::Shape(format!("fc weight must be [m,n], got {:?}", weight.shape()))),
    };
    if input.len() != n {
        return Err(Error::Shape(format!(
            "fc input has {} elements but weights expect {n}",
            input.len()
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::Shape(format!("fc bias must be [{m}], got {:?}", bias.shape())));
    }
    Ok((m, n))
}

/// `out[i] = sum_j weight[i,j] * input[j] + bias[i]`. The input is read
/// flat, so any tensor with `n` elements is accepted.
pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = check_fc(input, weight, bias)?;
    let x = input.data();
    let out = weight
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect();
    Tensor::new(vec![m], out)
}

/// Gradients of [`fully_connected`]; `d_input` keeps the input's shape.
pub fn fully_connected_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, n) = match weight.shape()[..] {
        [m, n] => (m, n),
        _ => return Err(Error::Shape("fc weight must be 2-D".into())),
    };
    if grad_out.len() != m || input.len() != n {
        return Err(Error::Shape("fc backward dimension mismatch".into()));
    }
    let x = input.data();
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; m * n];
    for (i, &g) in grad_out.data().iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weight.data()[i * n..(i + 1) * n];
        let grow = &mut gw[i * n..(i + 1) * n];
        for j in 0..n {
            grow[j] = g * x[j];
            gx[j] += row[j] * g;
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(vec![m, n], gw)?,
        Tensor::new(vec![m], grad_out.data().to_vec())?,
    ))
}

/// Numerically stable softmax over a flat vector.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.into_iter().map(|e| e / sum).collect())
        .expect("shape preserved")
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::Shape("softmax gradient shape mismatch".into()));
    }
    let dot: f64 = output.data().iter().zip(grad_out.data()).map(|(y, g)| y * g).sum();
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(y, g)| y * (g - dot))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Cross-entropy of `softmax(logits)` against class `target`, with the
/// gradient with respect to the logits (`p - onehot`).
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.data().iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits.data()[target];
    let mut grad = softmax(logits);
    grad.data_mut()[target] -= 1.0;
    Ok((loss, grad))
}

/// Smooth-L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

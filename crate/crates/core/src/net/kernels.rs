//! Layer kernels. All accumulation orders are fixed so outputs are
//! bit-reproducible.

use super::{BatchNorm, Conv2d, Linear, MaxPool, Op};
use crate::error::{Error, Result};
use crate::tensor::{channel_stats, Tensor};

fn mismatch(node: &str, detail: String) -> Error {
    Error::ShapeMismatch {
        node: node.to_string(),
        detail,
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Output shape without the batch dim, given input shapes without it.
pub(super) fn output_shape(node: &str, op: &Op, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let x = inputs[0];
    match op {
        Op::Conv2d(c) => match x {
            [ch, h, w] if *ch == c.in_ch => {
                let oh = conv_out(*h, c.kh, c.stride, c.padding);
                let ow = conv_out(*w, c.kw, c.stride, c.padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![c.out_ch, oh, ow]),
                    _ => Err(mismatch(
                        node,
                        format!("kernel larger than padded input {x:?}"),
                    )),
                }
            }
            _ => Err(mismatch(
                node,
                format!("Conv2d expects [{}, H, W] input, got {x:?}", c.in_ch),
            )),
        },
        Op::BatchNorm(bn) => match x {
            [ch, ..] if *ch == bn.channels() && (x.len() == 1 || x.len() == 3) => Ok(x.to_vec()),
            _ => Err(mismatch(
                node,
                format!("BatchNorm over {} channels got input {x:?}", bn.channels()),
            )),
        },
        Op::Relu => Ok(x.to_vec()),
        Op::MaxPool(p) => match x {
            [ch, h, w] => {
                let oh = conv_out(*h, p.kernel, p.stride, p.padding);
                let ow = conv_out(*w, p.kernel, p.stride, p.padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if p.padding * 2 <= p.kernel => Ok(vec![*ch, oh, ow]),
                    _ => Err(mismatch(
                        node,
                        format!("invalid pooling window for input {x:?}"),
                    )),
                }
            }
            _ => Err(mismatch(
                node,
                format!("MaxPool expects [C, H, W], got {x:?}"),
            )),
        },
        Op::GlobalAvgPool => match x {
            [ch, _, _] => Ok(vec![*ch]),
            _ => Err(mismatch(
                node,
                format!("GlobalAvgPool expects [C, H, W], got {x:?}"),
            )),
        },
        Op::Linear(l) => {
            let n: usize = x.iter().product();
            if n == l.in_features {
                Ok(vec![l.out_features])
            } else {
                Err(mismatch(
                    node,
                    format!("Linear expects {} features, got {x:?}", l.in_features),
                ))
            }
        }
        Op::Add => {
            if inputs[0] == inputs[1] {
                Ok(x.to_vec())
            } else {
                Err(mismatch(
                    node,
                    format!("Add inputs differ: {:?} vs {:?}", inputs[0], inputs[1]),
                ))
            }
        }
    }
}

/// Direct convolution. Each output element accumulates input-channel-major,
/// then kernel row, then kernel column, starting from zero; the bias is added
/// last. Zero weights contribute nothing and are skipped.
pub(super) fn conv2d(x: &Tensor, c: &Conv2d) -> Tensor {
    let [n, _, h, w] = dims4(x);
    let oh = (h + 2 * c.padding - c.kh) / c.stride + 1;
    let ow = (w + 2 * c.padding - c.kw) / c.stride + 1;
    let mut out = vec![0.0f32; n * c.out_ch * oh * ow];
    let weight = c.weight.data();
    let xd = x.data();
    let (s, p) = (c.stride, c.padding);
    for b in 0..n {
        for oc in 0..c.out_ch {
            let plane = &mut out[(b * c.out_ch + oc) * oh * ow..][..oh * ow];
            for ic in 0..c.in_ch {
                let xin = &xd[(b * c.in_ch + ic) * h * w..][..h * w];
                for ky in 0..c.kh {
                    for kx in 0..c.kw {
                        let wv = weight[((oc * c.in_ch + ic) * c.kh + ky) * c.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // ox range with 0 <= ox*s + kx - p < w
                        let ox_lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
                        let ox_hi = if w + p > kx {
                            (w + p - kx - 1) / s + 1
                        } else {
                            0
                        };
                        let ox_hi = ox_hi.min(ow);
                        for oy in 0..oh {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let row = &xin[(iy - p) * w..][..w];
                            let orow = &mut plane[oy * ow..][..ow];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
            if let Some(bias) = &c.bias {
                let bv = bias[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, c.out_ch, oh, ow], out).expect("conv output shape")
}

pub(super) fn linear(x: &Tensor, l: &Linear) -> Tensor {
    let n = x.shape()[0];
    let xd = x.data();
    let wd = l.weight.data();
    let mut out = Vec::with_capacity(n * l.out_features);
    for b in 0..n {
        let row = &xd[b * l.in_features..][..l.in_features];
        for o in 0..l.out_features {
            let wrow = &wd[o * l.in_features..][..l.in_features];
            let mut acc = 0.0f32;
            for (wv, xv) in wrow.iter().zip(row) {
                acc += wv * xv;
            }
            if let Some(bias) = &l.bias {
                acc += bias[o];
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![n, l.out_features], out).expect("linear output shape")
}

/// Per-channel affine map `y = x * scale[c] + shift[c]`.
fn affine(x: &Tensor, scale: &[f32], shift: &[f32]) -> Tensor {
    let c = x.shape()[1];
    let hw: usize = x.shape()[2..].iter().product();
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        plane.iter_mut().for_each(|v| *v = *v * a + b);
    }
    out
}

fn bn_affine(bn: &BatchNorm, mean: &[f64], var: &[f64]) -> (Vec<f32>, Vec<f32>) {
    let eps = bn.eps as f64;
    let mut scale = Vec::with_capacity(bn.channels());
    let mut shift = Vec::with_capacity(bn.channels());
    for ch in 0..bn.channels() {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let a = bn.gamma[ch] as f64 * inv;
        scale.push(a as f32);
        shift.push((bn.beta[ch] as f64 - mean[ch] * a) as f32);
    }
    (scale, shift)
}

/// Inference-mode BatchNorm using running statistics.
pub(super) fn batch_norm(x: &Tensor, bn: &BatchNorm) -> Tensor {
    let mean: Vec<f64> = bn.running_mean.iter().map(|&v| v as f64).collect();
    let var: Vec<f64> = bn.running_var.iter().map(|&v| v as f64).collect();
    let (scale, shift) = bn_affine(bn, &mean, &var);
    affine(x, &scale, &shift)
}

/// Training-mode BatchNorm: normalizes with the batch's own population
/// statistics and returns them.
pub(super) fn batch_norm_batch_stats(
    x: &Tensor,
    bn: &BatchNorm,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let stats = channel_stats(x)?;
    let (scale, shift) = bn_affine(bn, &stats.mean, &stats.var);
    Ok((affine(x, &scale, &shift), stats.mean, stats.var))
}

pub(super) fn relu(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub(super) fn max_pool(x: &Tensor, p: &MaxPool) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let oh = (h + 2 * p.padding - p.kernel) / p.stride + 1;
    let ow = (w + 2 * p.padding - p.kernel) / p.stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..p.kernel {
                    let iy = oy * p.stride + ky;
                    if iy < p.padding || iy - p.padding >= h {
                        continue;
                    }
                    for kx in 0..p.kernel {
                        let ix = ox * p.stride + kx;
                        if ix < p.padding || ix - p.padding >= w {
                            continue;
                        }
                        m = m.max(plane[(iy - p.padding) * w + ix - p.padding]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).expect("pool output shape")
}

pub(super) fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let out = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
        .collect();
    Tensor::new(vec![n, c], out).expect("pool output shape")
}

pub(super) fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("add output shape")
}

fn dims4(x: &Tensor) -> [usize; 4] {
    match x.shape() {
        [n, c, h, w] => [*n, *c, *h, *w],
        other => panic!("expected a 4-d tensor, got {other:?}"),
    }
}

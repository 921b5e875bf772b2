//! Differentiable operators.
//!
//! Every function here computes its forward result eagerly and registers a
//! closure that maps the output gradient back onto the inputs. Image-like
//! tensors are rank 3 `[channels, height, width]`; there is no batch axis
//! because the training loop feeds one image per domain per step.
//!
//! Reductions that feed loss values accumulate in `f64` regardless of the
//! tensor's scalar type, with a fixed iteration order, so results are
//! reproducible bit for bit across runs.

use crate::labelmap::{LabelMap, IGNORE};
use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

fn same_shape<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn want_rank<T: Real>(
    op: &'static str,
    t: &Tensor<T>,
    rank: usize,
) -> Result<(), TensorError> {
    if t.rank() != rank {
        return Err(TensorError::RankMismatch {
            op,
            expected: rank,
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("add", a, b)?;
    let out: Vec<T> = {
        let da = a.data();
        let db = b.data();
        da.iter().zip(db.iter()).map(|(&x, &y)| x + y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g);
            }
            if pb.requires_grad() {
                pb.accumulate_grad(g);
            }
        },
    ))
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("mul", a, b)?;
    let out: Vec<T> = {
        let da = a.data();
        let db = b.data();
        da.iter().zip(db.iter()).map(|(&x, &y)| x * y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        move |g| {
            if pa.requires_grad() {
                let db = pb.data();
                pa.with_grad_mut(|buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * db[i];
                    }
                });
            }
            if pb.requires_grad() {
                let da = pa.data();
                pb.with_grad_mut(|buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * da[i];
                    }
                });
            }
        },
    ))
}

/// `a * x + b` with constant coefficients.
pub fn affine<T: Real>(x: &Tensor<T>, a: T, b: T) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| a * v + b).collect();
    let px = x.clone();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g| {
        px.with_grad_mut(|buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + a * g[i];
            }
        });
    })
}

/// Multiply by a constant.
pub fn scale<T: Real>(x: &Tensor<T>, c: T) -> Tensor<T> {
    affine(x, c, T::zero())
}

/// Sum of all elements, as a `[1]` tensor. Accumulates in f64.
pub fn sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
    let px = x.clone();
    Tensor::from_op(vec![1], vec![T::from_f64(total)], vec![x.clone()], move |g| {
        let g0 = g[0];
        px.with_grad_mut(|buf| {
            for b in buf.iter_mut() {
                *b = *b + g0;
            }
        });
    })
}

/// `max(x, 0)` elementwise.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, T::zero())
}

/// `x if x > 0 else slope * x`, elementwise. The gradient at exactly 0 uses
/// the negative branch.
pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let out: Vec<T> = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { slope * v })
        .collect();
    let px = x.clone();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g| {
        let dx = px.data();
        px.with_grad_mut(|buf| {
            for i in 0..buf.len() {
                let factor = if dx[i] > T::zero() { T::one() } else { slope };
                buf[i] = buf[i] + factor * g[i];
            }
        });
    })
}

/// Logistic function, elementwise.
pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            let y = 1.0 / (1.0 + (-v.as_f64()).exp());
            T::from_f64(y)
        })
        .collect();
    let saved = out.clone();
    let px = x.clone();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g| {
        px.with_grad_mut(|buf| {
            for i in 0..buf.len() {
                let y = saved[i];
                buf[i] = buf[i] + g[i] * y * (T::one() - y);
            }
        });
    })
}

/// `-sum(log(max(x, floor)))` as a `[1]` tensor.
///
/// The floor keeps saturated probabilities from producing infinities; inputs
/// at or below it get zero gradient.
pub fn neg_log_sum<T: Real>(x: &Tensor<T>, floor: T) -> Tensor<T> {
    let mut total = 0.0f64;
    for &v in x.data().iter() {
        let c = if v > floor { v } else { floor };
        total -= c.as_f64().ln();
    }
    let px = x.clone();
    Tensor::from_op(vec![1], vec![T::from_f64(total)], vec![x.clone()], move |g| {
        let g0 = g[0];
        let dx = px.data();
        px.with_grad_mut(|buf| {
            for i in 0..buf.len() {
                if dx[i] > floor {
                    buf[i] = buf[i] - g0 / dx[i];
                }
            }
        });
    })
}

/// 2-D cross-correlation over a `[c_in, h, w]` input with a
/// `[c_out, c_in, kh, kw]` kernel and a `[c_out]` bias.
///
/// Output extents follow the usual floor rule
/// `(extent + 2*pad - kernel) / stride + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    want_rank("conv2d", input, 3)?;
    want_rank("conv2d", weight, 4)?;
    want_rank("conv2d", bias, 1)?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, wc_in, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc_in != c_in {
        return Err(TensorError::BadExtent {
            op: "conv2d",
            detail: format!("kernel expects {wc_in} input channels, input has {c_in}"),
        });
    }
    if bias.shape()[0] != c_out {
        return Err(TensorError::BadExtent {
            op: "conv2d",
            detail: format!("bias has {} entries for {c_out} output channels", bias.shape()[0]),
        });
    }
    if stride == 0 {
        return Err(TensorError::BadExtent {
            op: "conv2d",
            detail: "stride must be at least 1".into(),
        });
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::BadExtent {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let mut out = vec![T::zero(); c_out * oh * ow];
    {
        let din = input.data();
        let dw = weight.data();
        let db = bias.data();
        for o in 0..c_out {
            let wbase_o = o * c_in * kh * kw;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let mut acc = db[o];
                    for i in 0..c_in {
                        let ibase = i * h * w;
                        let wbase = wbase_o + i * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = ibase + iy as usize * w;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + din[irow + ix as usize] * dw[wrow + kx as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }

    let (pi, pw, pb) = (input.clone(), weight.clone(), bias.clone());
    Ok(Tensor::from_op(
        vec![c_out, oh, ow],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        move |g| {
            if pb.requires_grad() {
                pb.with_grad_mut(|buf| {
                    for o in 0..c_out {
                        let mut acc = 0.0f64;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                acc += g[(o * oh + oy) * ow + ox].as_f64();
                            }
                        }
                        buf[o] = buf[o] + T::from_f64(acc);
                    }
                });
            }
            if pw.requires_grad() {
                let din = pi.data();
                pw.with_grad_mut(|buf| {
                    for o in 0..c_out {
                        for oy in 0..oh {
                            let iy0 = (oy * stride) as isize - pad as isize;
                            for ox in 0..ow {
                                let ix0 = (ox * stride) as isize - pad as isize;
                                let gv = g[(o * oh + oy) * ow + ox];
                                for i in 0..c_in {
                                    let ibase = i * h * w;
                                    let wbase = (o * c_in + i) * kh * kw;
                                    for ky in 0..kh {
                                        let iy = iy0 + ky as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let irow = ibase + iy as usize * w;
                                        let wrow = wbase + ky * kw;
                                        for kx in 0..kw {
                                            let ix = ix0 + kx as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            buf[wrow + kx as usize] = buf[wrow + kx as usize]
                                                + gv * din[irow + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if pi.requires_grad() {
                let dw = pw.data();
                pi.with_grad_mut(|buf| {
                    for o in 0..c_out {
                        for oy in 0..oh {
                            let iy0 = (oy * stride) as isize - pad as isize;
                            for ox in 0..ow {
                                let ix0 = (ox * stride) as isize - pad as isize;
                                let gv = g[(o * oh + oy) * ow + ox];
                                for i in 0..c_in {
                                    let ibase = i * h * w;
                                    let wbase = (o * c_in + i) * kh * kw;
                                    for ky in 0..kh {
                                        let iy = iy0 + ky as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let irow = ibase + iy as usize * w;
                                        let wrow = wbase + ky * kw;
                                        for kx in 0..kw {
                                            let ix = ix0 + kx as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            buf[irow + ix as usize] = buf[irow + ix as usize]
                                                + gv * dw[wrow + kx as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        },
    ))
}

/// Bilinear resize of a `[c, h, w]` tensor using half-pixel sample centers:
/// `src = (dst + 0.5) * (in_extent / out_extent) - 0.5`, clamped to the
/// valid range, so corners saturate instead of extrapolating.
pub fn bilinear_resize<T: Real>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    want_rank("bilinear_resize", x, 3)?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::BadExtent {
            op: "bilinear_resize",
            detail: "output extents must be positive".into(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);

    // Per-axis sample positions: (low index, high index, high weight).
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);

    let mut out = vec![T::zero(); c * out_h * out_w];
    {
        let din = x.data();
        for ch in 0..c {
            let base = ch * h * w;
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = din[base + y0 * w + x0].as_f64();
                    let v01 = din[base + y0 * w + x1].as_f64();
                    let v10 = din[base + y1 * w + x0].as_f64();
                    let v11 = din[base + y1 * w + x1].as_f64();
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    out[(ch * out_h + oy) * out_w + ox] = T::from_f64(top + fy * (bot - top));
                }
            }
        }
    }

    let px = x.clone();
    let (ys_b, xs_b) = (ys, xs);
    Ok(Tensor::from_op(
        vec![c, out_h, out_w],
        out,
        vec![x.clone()],
        move |g| {
            px.with_grad_mut(|buf| {
                for ch in 0..c {
                    let base = ch * h * w;
                    for (oy, &(y0, y1, fy)) in ys_b.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs_b.iter().enumerate() {
                            let gv = g[(ch * out_h + oy) * out_w + ox].as_f64();
                            let w00 = (1.0 - fy) * (1.0 - fx);
                            let w01 = (1.0 - fy) * fx;
                            let w10 = fy * (1.0 - fx);
                            let w11 = fy * fx;
                            buf[base + y0 * w + x0] =
                                buf[base + y0 * w + x0] + T::from_f64(gv * w00);
                            buf[base + y0 * w + x1] =
                                buf[base + y0 * w + x1] + T::from_f64(gv * w01);
                            buf[base + y1 * w + x0] =
                                buf[base + y1 * w + x0] + T::from_f64(gv * w10);
                            buf[base + y1 * w + x1] =
                                buf[base + y1 * w + x1] + T::from_f64(gv * w11);
                        }
                    }
                }
            });
        },
    ))
}

/// Channel-wise softmax of `[c, h, w]` logits; every pixel's channel vector
/// sums to one.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    want_rank("softmax_channels", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    {
        let din = x.data();
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(din[ch * hw + p].as_f64());
            }
            let mut z = 0.0f64;
            for ch in 0..c {
                z += (din[ch * hw + p].as_f64() - m).exp();
            }
            for ch in 0..c {
                out[ch * hw + p] = T::from_f64((din[ch * hw + p].as_f64() - m).exp() / z);
            }
        }
    }

    let saved = out.clone();
    let px = x.clone();
    Ok(Tensor::from_op(
        vec![c, h, w],
        out,
        vec![x.clone()],
        move |g| {
            px.with_grad_mut(|buf| {
                for p in 0..hw {
                    let mut dot = 0.0f64;
                    for ch in 0..c {
                        let i = ch * hw + p;
                        dot += g[i].as_f64() * saved[i].as_f64();
                    }
                    for ch in 0..c {
                        let i = ch * hw + p;
                        let s = saved[i].as_f64();
                        buf[i] = buf[i] + T::from_f64(s * (g[i].as_f64() - dot));
                    }
                }
            });
        },
    ))
}

/// Summed softmax cross-entropy between `[c, h, w]` logits and a same-size
/// label map. Label id `l` scores channel `l - 1`; pixels labelled 0 are
/// skipped entirely. Returns a `[1]` tensor (0 when every pixel is ignored).
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &LabelMap,
) -> Result<Tensor<T>, TensorError> {
    want_rank("softmax_cross_entropy", logits, 3)?;
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if labels.height() != h || labels.width() != w {
        return Err(TensorError::LabelSize {
            expected: (h, w),
            got: (labels.height(), labels.width()),
        });
    }
    let hw = h * w;
    let mut probs = vec![T::zero(); c * hw];
    let mut total = 0.0f64;
    {
        let din = logits.data();
        for p in 0..hw {
            let label = labels.data()[p];
            if label == IGNORE {
                continue;
            }
            if label as usize > c {
                return Err(TensorError::ClassOutOfRange {
                    class: label,
                    classes: c,
                });
            }
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(din[ch * hw + p].as_f64());
            }
            let mut z = 0.0f64;
            for ch in 0..c {
                z += (din[ch * hw + p].as_f64() - m).exp();
            }
            let target = (label - 1) as usize;
            total += z.ln() + m - din[target * hw + p].as_f64();
            for ch in 0..c {
                probs[ch * hw + p] = T::from_f64((din[ch * hw + p].as_f64() - m).exp() / z);
            }
        }
    }

    let plog = logits.clone();
    let lab = labels.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![T::from_f64(total)],
        vec![logits.clone()],
        move |g| {
            let g0 = g[0];
            plog.with_grad_mut(|buf| {
                for p in 0..hw {
                    let label = lab.data()[p];
                    if label == IGNORE {
                        continue;
                    }
                    let target = (label - 1) as usize;
                    for ch in 0..c {
                        let i = ch * hw + p;
                        let y = if ch == target { T::one() } else { T::zero() };
                        buf[i] = buf[i] + g0 * (probs[i] - y);
                    }
                }
            });
        },
    ))
}

/// Pull feature vectors for a set of spatial positions out of a `[k, h, w]`
/// map. `indices` are flattened `y * w + x` positions; the result is
/// `[indices.len(), k]`, one row per position. Duplicate indices are allowed
/// and their gradients add up.
pub fn gather_pixels<T: Real>(
    feat: &Tensor<T>,
    indices: &[usize],
) -> Result<Tensor<T>, TensorError> {
    want_rank("gather_pixels", feat, 3)?;
    let (k, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let hw = h * w;
    for &i in indices {
        if i >= hw {
            return Err(TensorError::BadExtent {
                op: "gather_pixels",
                detail: format!("index {i} outside {h}x{w} map"),
            });
        }
    }
    let n = indices.len();
    let mut out = vec![T::zero(); n * k];
    {
        let din = feat.data();
        for (r, &p) in indices.iter().enumerate() {
            for ch in 0..k {
                out[r * k + ch] = din[ch * hw + p];
            }
        }
    }
    let pf = feat.clone();
    let idx = indices.to_vec();
    Ok(Tensor::from_op(
        vec![n, k],
        out,
        vec![feat.clone()],
        move |g| {
            pf.with_grad_mut(|buf| {
                for (r, &p) in idx.iter().enumerate() {
                    for ch in 0..k {
                        buf[ch * hw + p] = buf[ch * hw + p] + g[r * k + ch];
                    }
                }
            });
        },
    ))
}

//! Forward and backward kernels.
//!
//! Every kernel is a pure function of its inputs; the eager executor and the
//! gradient tape both dispatch here, so there is exactly one implementation
//! of each piece of math. Backward kernels are the hand-derived
//! vector-Jacobian products, validated against central finite differences in
//! the test suite.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Scalar, Tensor};

/// Cross-correlation of an NCHW input with an OIHW kernel, symmetric zero
/// padding, stride 1. Output spatial dims are `H + 2p - kh + 1` etc.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    padding: usize,
) -> Result<Tensor<S>> {
    let (n_batch, c_in, h, w) = dims4(input, "conv2d input")?;
    let (c_out, kc_in, kh, kw) = dims4(kernel, "conv2d kernel")?;
    if c_in != kc_in {
        return Err(Error::ChannelMismatch {
            input: c_in,
            kernel: kc_in,
            input_shape: input.shape().to_vec(),
            kernel_shape: kernel.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidShape {
            context: "conv2d kernel".into(),
            shape: kernel.shape().to_vec(),
            reason: "kernel height/width must be odd".into(),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::InvalidShape {
            context: "conv2d".into(),
            shape: input.shape().to_vec(),
            reason: format!("padded input smaller than {kh}x{kw} kernel"),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias".into(),
                left: b.shape().to_vec(),
                right: vec![c_out],
            });
        }
    }
    let oh = h + 2 * padding - kh + 1;
    let ow = w + 2 * padding - kw + 1;

    let x = input.data();
    let k = kernel.data();
    let mut out = vec![S::ZERO; n_batch * c_out * oh * ow];

    for n in 0..n_batch {
        for co in 0..c_out {
            let out_base = (n * c_out + co) * oh * ow;
            if let Some(b) = bias {
                let bv = b.data()[co];
                out[out_base..out_base + oh * ow].fill(bv);
            }
            for ci in 0..c_in {
                let in_base = (n * c_in + ci) * h * w;
                let k_base = (co * c_in + ci) * kh * kw;
                for ki in 0..kh {
                    // rows where ih = row + ki - padding stays in [0, h)
                    let row_lo = padding.saturating_sub(ki);
                    let row_hi = (((h + padding) as isize - ki as isize).max(0) as usize).min(oh);
                    for kj in 0..kw {
                        let wgt = k[k_base + ki * kw + kj];
                        let col_lo = padding.saturating_sub(kj);
                        let col_hi =
                            (((w + padding) as isize - kj as isize).max(0) as usize).min(ow);
                        for row in row_lo..row_hi {
                            let ih = row + ki - padding;
                            let out_row = out_base + row * ow;
                            let in_row = in_base + ih * w;
                            for col in col_lo..col_hi {
                                let iw = col + kj - padding;
                                out[out_row + col] += wgt * x[in_row + iw];
                            }
                        }
                    }
                }
            }
        }
    }

    let t = Tensor::new(vec![n_batch, c_out, oh, ow], out)?;
    t.debug_assert_finite("conv2d");
    Ok(t)
}

/// dLoss/dInput of [`conv2d`].
pub fn conv2d_grad_input<S: Scalar>(
    grad_out: &Tensor<S>,
    kernel: &Tensor<S>,
    padding: usize,
    input_shape: &[usize],
) -> Tensor<S> {
    let [n_batch, c_in, h, w]: [usize; 4] = input_shape.try_into().expect("NCHW input shape");
    let (_, c_out, oh, ow) = dims4_unchecked(grad_out);
    let (_, _, kh, kw) = dims4_unchecked(kernel);

    let g = grad_out.data();
    let k = kernel.data();
    let mut gx = vec![S::ZERO; n_batch * c_in * h * w];

    for n in 0..n_batch {
        for co in 0..c_out {
            let g_base = (n * c_out + co) * oh * ow;
            for ci in 0..c_in {
                let gx_base = (n * c_in + ci) * h * w;
                let k_base = (co * c_in + ci) * kh * kw;
                for ki in 0..kh {
                    let row_lo = padding.saturating_sub(ki);
                    let row_hi = (((h + padding) as isize - ki as isize).max(0) as usize).min(oh);
                    for kj in 0..kw {
                        let wgt = k[k_base + ki * kw + kj];
                        let col_lo = padding.saturating_sub(kj);
                        let col_hi =
                            (((w + padding) as isize - kj as isize).max(0) as usize).min(ow);
                        for row in row_lo..row_hi {
                            let ih = row + ki - padding;
                            let g_row = g_base + row * ow;
                            let gx_row = gx_base + ih * w;
                            for col in col_lo..col_hi {
                                let iw = col + kj - padding;
                                gx[gx_row + iw] += wgt * g[g_row + col];
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor::new(input_shape.to_vec(), gx).expect("grad shape")
}

/// dLoss/dKernel of [`conv2d`].
pub fn conv2d_grad_kernel<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    kernel_shape: &[usize],
    padding: usize,
) -> Tensor<S> {
    let [c_out, c_in, kh, kw]: [usize; 4] = kernel_shape.try_into().expect("OIHW kernel shape");
    let (n_batch, _, h, w) = dims4_unchecked(input);
    let (_, _, oh, ow) = dims4_unchecked(grad_out);

    let g = grad_out.data();
    let x = input.data();
    let mut gk = vec![S::ZERO; c_out * c_in * kh * kw];

    for n in 0..n_batch {
        for co in 0..c_out {
            let g_base = (n * c_out + co) * oh * ow;
            for ci in 0..c_in {
                let in_base = (n * c_in + ci) * h * w;
                let k_base = (co * c_in + ci) * kh * kw;
                for ki in 0..kh {
                    let row_lo = padding.saturating_sub(ki);
                    let row_hi = (((h + padding) as isize - ki as isize).max(0) as usize).min(oh);
                    for kj in 0..kw {
                        let col_lo = padding.saturating_sub(kj);
                        let col_hi =
                            (((w + padding) as isize - kj as isize).max(0) as usize).min(ow);
                        let mut acc = S::ZERO;
                        for row in row_lo..row_hi {
                            let ih = row + ki - padding;
                            let g_row = g_base + row * ow;
                            let in_row = in_base + ih * w;
                            for col in col_lo..col_hi {
                                let iw = col + kj - padding;
                                acc += g[g_row + col] * x[in_row + iw];
                            }
                        }
                        gk[k_base + ki * kw + kj] += acc;
                    }
                }
            }
        }
    }

    Tensor::new(kernel_shape.to_vec(), gk).expect("grad shape")
}

/// dLoss/dBias of [`conv2d`]: sum of the output gradient over batch and space.
pub fn conv2d_grad_bias<S: Scalar>(grad_out: &Tensor<S>) -> Tensor<S> {
    let (n_batch, c_out, oh, ow) = dims4_unchecked(grad_out);
    let g = grad_out.data();
    let mut gb = vec![S::ZERO; c_out];
    for n in 0..n_batch {
        for co in 0..c_out {
            let base = (n * c_out + co) * oh * ow;
            for i in 0..oh * ow {
                gb[co] += g[base + i];
            }
        }
    }
    Tensor::new(vec![c_out], gb).expect("grad shape")
}

/// SiLU activation `x * sigmoid(x)`.
pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let t = x.map(|v| v * sigmoid(v));
    t.debug_assert_finite("silu");
    t
}

pub fn silu_grad<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    x.zip_map(grad_out, "silu_grad", |v, g| {
        let s = sigmoid(v);
        g * (s * (S::ONE + v * (S::ONE - s)))
    })
    .expect("grad shape")
}

/// Symmetric attention activation `sigmoid(x) - 0.5`: odd, bounded in
/// (-0.5, 0.5).
pub fn sigmoid_shift<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let half = S::from_f64(0.5);
    let t = x.map(|v| sigmoid(v) - half);
    t.debug_assert_finite("sigmoid_shift");
    t
}

pub fn sigmoid_shift_grad<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    x.zip_map(grad_out, "sigmoid_shift_grad", |v, g| {
        let s = sigmoid(v);
        g * s * (S::ONE - s)
    })
    .expect("grad shape")
}

/// Hyperbolic tangent, the alternative symmetric attention activation.
pub fn tanh_act<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let t = x.map(|v| v.tanh());
    t.debug_assert_finite("tanh");
    t
}

pub fn tanh_grad<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    x.zip_map(grad_out, "tanh_grad", |v, g| {
        let t = v.tanh();
        g * (S::ONE - t * t)
    })
    .expect("grad shape")
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let t = a.zip_map(b, "add", |x, y| x + y)?;
    t.debug_assert_finite("add");
    Ok(t)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let t = a.zip_map(b, "sub", |x, y| x - y)?;
    t.debug_assert_finite("sub");
    Ok(t)
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let t = a.zip_map(b, "mul", |x, y| x * y)?;
    t.debug_assert_finite("mul");
    Ok(t)
}

pub fn scale<S: Scalar>(x: &Tensor<S>, factor: S) -> Tensor<S> {
    let t = x.map(|v| v * factor);
    t.debug_assert_finite("scale");
    t
}

/// Plain 2-D matrix product.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::MatmulDimMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            let b_row = p * n;
            let o_row = i * n;
            for j in 0..n {
                out[o_row + j] += av * bd[b_row + j];
            }
        }
    }
    let t = Tensor::new(vec![m, n], out)?;
    t.debug_assert_finite("matmul");
    Ok(t)
}

/// dLoss/dA of `A @ B`: `G @ B^T`.
pub fn matmul_grad_a<S: Scalar>(grad_out: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (grad_out.shape()[0], grad_out.shape()[1]);
    let k = b.shape()[0];
    let (g, bd) = (grad_out.data(), b.data());
    let mut out = vec![S::ZERO; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = S::ZERO;
            for j in 0..n {
                acc += g[i * n + j] * bd[p * n + j];
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::new(vec![m, k], out).expect("grad shape")
}

/// dLoss/dB of `A @ B`: `A^T @ G`.
pub fn matmul_grad_b<S: Scalar>(grad_out: &Tensor<S>, a: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (grad_out.shape()[0], grad_out.shape()[1]);
    let k = a.shape()[1];
    let (g, ad) = (grad_out.data(), a.data());
    let mut out = vec![S::ZERO; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            let o_row = p * n;
            let g_row = i * n;
            for j in 0..n {
                out[o_row + j] += av * g[g_row + j];
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("grad shape")
}

/// Depth-to-space rearrangement: `[N, C*s^2, H, W] -> [N, C, s*H, s*W]`,
/// with `out[n, c, h*s+i, w*s+j] = in[n, c*s^2 + i*s + j, h, w]`.
pub fn pixel_shuffle<S: Scalar>(x: &Tensor<S>, s: usize) -> Result<Tensor<S>> {
    let (n_batch, c_full, h, w) = dims4(x, "pixel_shuffle")?;
    if s == 0 || c_full % (s * s) != 0 {
        return Err(Error::PixelShuffleChannels {
            channels: c_full,
            factor: s,
        });
    }
    let c = c_full / (s * s);
    let (out_h, out_w) = (h * s, w * s);
    let xd = x.data();
    let mut out = vec![S::ZERO; n_batch * c * out_h * out_w];
    for n in 0..n_batch {
        for cc in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let in_c = cc * s * s + i * s + j;
                    let in_base = (n * c_full + in_c) * h * w;
                    let out_base = (n * c + cc) * out_h * out_w;
                    for hh in 0..h {
                        let in_row = in_base + hh * w;
                        let out_row = out_base + (hh * s + i) * out_w + j;
                        for ww in 0..w {
                            out[out_row + ww * s] = xd[in_row + ww];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_batch, c, out_h, out_w], out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`] (and its backward
/// rearrangement).
pub fn pixel_unshuffle<S: Scalar>(x: &Tensor<S>, s: usize) -> Result<Tensor<S>> {
    let (n_batch, c, out_h, out_w) = dims4(x, "pixel_unshuffle")?;
    if s == 0 || out_h % s != 0 || out_w % s != 0 {
        return Err(Error::InvalidShape {
            context: "pixel_unshuffle".into(),
            shape: x.shape().to_vec(),
            reason: format!("spatial dims must be divisible by {s}"),
        });
    }
    let (h, w) = (out_h / s, out_w / s);
    let c_full = c * s * s;
    let xd = x.data();
    let mut out = vec![S::ZERO; n_batch * c_full * h * w];
    for n in 0..n_batch {
        for cc in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let out_c = cc * s * s + i * s + j;
                    let out_base = (n * c_full + out_c) * h * w;
                    let in_base = (n * c + cc) * out_h * out_w;
                    for hh in 0..h {
                        let out_row = out_base + hh * w;
                        let in_row = in_base + (hh * s + i) * out_w + j;
                        for ww in 0..w {
                            out[out_row + ww] = xd[in_row + ww * s];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_batch, c_full, h, w], out)
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels<S: Scalar>(xs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = xs.first().ok_or_else(|| Error::InvalidShape {
        context: "concat_channels".into(),
        shape: vec![],
        reason: "empty input list".into(),
    })?;
    let (n_batch, _, h, w) = dims4(first, "concat_channels")?;
    let mut c_total = 0;
    for x in xs {
        let (n2, c2, h2, w2) = dims4(x, "concat_channels")?;
        if n2 != n_batch || h2 != h || w2 != w {
            return Err(Error::ShapeMismatch {
                context: "concat_channels".into(),
                left: first.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        c_total += c2;
    }
    let mut out = vec![S::ZERO; n_batch * c_total * h * w];
    let plane = h * w;
    for n in 0..n_batch {
        let mut c_off = 0;
        for x in xs {
            let c = x.shape()[1];
            let src = &x.data()[n * c * plane..(n + 1) * c * plane];
            let dst_base = (n * c_total + c_off) * plane;
            out[dst_base..dst_base + c * plane].copy_from_slice(src);
            c_off += c;
        }
    }
    Tensor::new(vec![n_batch, c_total, h, w], out)
}

/// Split an NCHW tensor back into channel groups (backward of
/// [`concat_channels`]).
pub fn split_channels<S: Scalar>(x: &Tensor<S>, sizes: &[usize]) -> Vec<Tensor<S>> {
    let (n_batch, c_total, h, w) = dims4_unchecked(x);
    assert_eq!(sizes.iter().sum::<usize>(), c_total, "split sizes");
    let plane = h * w;
    let mut parts = Vec::with_capacity(sizes.len());
    let mut c_off = 0;
    for &c in sizes {
        let mut data = vec![S::ZERO; n_batch * c * plane];
        for n in 0..n_batch {
            let src_base = (n * c_total + c_off) * plane;
            data[n * c * plane..(n + 1) * c * plane]
                .copy_from_slice(&x.data()[src_base..src_base + c * plane]);
        }
        parts.push(Tensor::new(vec![n_batch, c, h, w], data).expect("split shape"));
        c_off += c;
    }
    parts
}

/// L2-normalize each spatial position's channel vector of a `[N, C, M]`
/// tensor, guarding short vectors with `max(norm, eps)`.
pub fn normalize_positions<S: Scalar>(x: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let (n_batch, c, m) = dims3(x, "normalize_positions")?;
    let xd = x.data();
    let mut out = vec![S::ZERO; xd.len()];
    for n in 0..n_batch {
        for pos in 0..m {
            let base = n * c * m + pos;
            let mut sq = S::ZERO;
            for ch in 0..c {
                let v = xd[base + ch * m];
                sq += v * v;
            }
            let denom = sq.sqrt().maxs(eps);
            for ch in 0..c {
                out[base + ch * m] = xd[base + ch * m] / denom;
            }
        }
    }
    let t = Tensor::new(x.shape().to_vec(), out)?;
    t.debug_assert_finite("normalize_positions");
    Ok(t)
}

pub fn normalize_positions_grad<S: Scalar>(
    x: &Tensor<S>,
    grad_out: &Tensor<S>,
    eps: S,
) -> Tensor<S> {
    let (n_batch, c, m) = dims3_unchecked(x);
    let xd = x.data();
    let g = grad_out.data();
    let mut gx = vec![S::ZERO; xd.len()];
    for n in 0..n_batch {
        for pos in 0..m {
            let base = n * c * m + pos;
            let mut sq = S::ZERO;
            for ch in 0..c {
                let v = xd[base + ch * m];
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm > eps {
                // u = x / norm; du/dx = (I - u u^T) / norm
                let mut dot = S::ZERO;
                for ch in 0..c {
                    dot += (xd[base + ch * m] / norm) * g[base + ch * m];
                }
                for ch in 0..c {
                    let u = xd[base + ch * m] / norm;
                    gx[base + ch * m] = (g[base + ch * m] - u * dot) / norm;
                }
            } else {
                for ch in 0..c {
                    gx[base + ch * m] = g[base + ch * m] / eps;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx).expect("grad shape")
}

/// Per-sample Gram matrix over positions: `[N, C, M] -> [N, M, M]` with
/// `A[n, i, j] = sum_c x[n, c, i] * x[n, c, j]`.
pub fn gram_batched<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n_batch, c, m) = dims3(x, "gram_batched")?;
    let xd = x.data();
    let mut out = vec![S::ZERO; n_batch * m * m];
    for n in 0..n_batch {
        let x_base = n * c * m;
        let a_base = n * m * m;
        for ch in 0..c {
            let row = x_base + ch * m;
            for i in 0..m {
                let xi = xd[row + i];
                let a_row = a_base + i * m;
                for j in 0..m {
                    out[a_row + j] += xi * xd[row + j];
                }
            }
        }
    }
    let t = Tensor::new(vec![n_batch, m, m], out)?;
    t.debug_assert_finite("gram_batched");
    Ok(t)
}

/// dLoss/dX of [`gram_batched`]: `x @ (G + G^T)` per sample.
pub fn gram_batched_grad<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let (n_batch, c, m) = dims3_unchecked(x);
    let xd = x.data();
    let g = grad_out.data();
    let mut gx = vec![S::ZERO; xd.len()];
    for n in 0..n_batch {
        let x_base = n * c * m;
        let a_base = n * m * m;
        for ch in 0..c {
            let row = x_base + ch * m;
            for i in 0..m {
                let mut acc = S::ZERO;
                for j in 0..m {
                    acc += xd[row + j] * (g[a_base + i * m + j] + g[a_base + j * m + i]);
                }
                gx[row + i] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx).expect("grad shape")
}

/// Mean of absolute values, as a `[1]` tensor.
pub fn abs_mean<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let n = S::from_f64(x.len() as f64);
    let total: S = x.data().iter().map(|&v| v.abs()).sum();
    Tensor::scalar(total / n)
}

pub fn abs_mean_grad<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let g = grad_out.item() / S::from_f64(x.len() as f64);
    x.map(|v| {
        if v > S::ZERO {
            g
        } else if v < S::ZERO {
            -g
        } else {
            S::ZERO
        }
    })
}

/// Mean of squares, as a `[1]` tensor.
pub fn sq_mean<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let n = S::from_f64(x.len() as f64);
    let total: S = x.data().iter().map(|&v| v * v).sum();
    Tensor::scalar(total / n)
}

pub fn sq_mean_grad<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let g = grad_out.item() * S::from_f64(2.0) / S::from_f64(x.len() as f64);
    x.map(|v| g * v)
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor::scalar(x.data().iter().copied().sum())
}

pub fn sum_grad<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    Tensor::full(x.shape().to_vec(), grad_out.item())
}

fn dims4<S: Scalar>(t: &Tensor<S>, context: &str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::InvalidShape {
            context: context.into(),
            shape: t.shape().to_vec(),
            reason: "expected a rank-4 NCHW tensor".into(),
        });
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

fn dims4_unchecked<S: Scalar>(t: &Tensor<S>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn dims3<S: Scalar>(t: &Tensor<S>, context: &str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::InvalidShape {
            context: context.into(),
            shape: t.shape().to_vec(),
            reason: "expected a rank-3 [N, C, M] tensor".into(),
        });
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2]))
}

fn dims3_unchecked<S: Scalar>(t: &Tensor<S>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sextuple-loop convolution, kept deliberately naive as the
    /// reference for the production kernel.
    fn conv2d_reference(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        padding: usize,
    ) -> Tensor<f64> {
        let (nb, ci, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (co, _, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        let oh = h + 2 * padding - kh + 1;
        let ow = w + 2 * padding - kw + 1;
        let mut out = vec![0.0; nb * co * oh * ow];
        for n in 0..nb {
            for o in 0..co {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                        for c in 0..ci {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = y as isize + ki as isize - padding as isize;
                                    let ix = x as isize + kj as isize - padding as isize;
                                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w
                                    {
                                        let iv = input.data()
                                            [((n * ci + c) * h + iy as usize) * w + ix as usize];
                                        let kv =
                                            kernel.data()[((o * ci + c) * kh + ki) * kw + kj];
                                        acc += iv * kv;
                                    }
                                }
                            }
                        }
                        out[((n * co + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![nb, co, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_ones_counting() {
        let x = Tensor::<f32>::ones(vec![1, 1, 3, 3]);
        let k = Tensor::<f32>::ones(vec![1, 1, 3, 3]);
        let y = conv2d(&x, &k, None, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0); // center counts the full window
        assert_eq!(y.data()[0], 4.0); // corner sees a 2x2 overlap
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform(vec![2, 3, 4, 5], -1.0, 1.0, &mut rng);
        // 1x1 identity per channel: kernel[c][c] = 1
        let mut k = Tensor::<f32>::zeros(vec![3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &k, None, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::gaussian(vec![2, 3, 5, 5], 0.0, 1.0, &mut rng);
        let k = Tensor::<f64>::gaussian(vec![4, 3, 3, 3], 0.0, 0.3, &mut rng);
        let b = Tensor::<f64>::gaussian(vec![4], 0.0, 0.1, &mut rng);
        let got = conv2d(&x, &k, Some(&b), 1).unwrap();
        let want = conv2d_reference(&x, &k, Some(&b), 1);
        assert!(got.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn conv_channel_mismatch_is_structured() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![2, 4, 3, 3]);
        match conv2d(&x, &k, None, 1) {
            Err(Error::ChannelMismatch { input: 3, kernel: 4, .. }) => {}
            other => panic!("expected channel mismatch, got {other:?}"),
        }
    }

    #[test]
    fn silu_values() {
        let x = Tensor::<f64>::new(vec![3], vec![0.0, 1.0, 25.0]).unwrap();
        let y = silu(&x);
        assert_eq!(y.data()[0], 0.0);
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y.data()[1] - sig1).abs() < 1e-12);
        assert!((y.data()[2] - 25.0).abs() < 1e-4); // asymptote for large x
    }

    #[test]
    fn sigmoid_shift_is_odd_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::gaussian(vec![64], 0.0, 3.0, &mut rng);
        let pos = sigmoid_shift(&x);
        let neg = sigmoid_shift(&x.map(|v| -v));
        for (&p, &n) in pos.data().iter().zip(neg.data()) {
            assert!((p + n).abs() < 1e-7);
            assert!(p > -0.5 && p < 0.5);
        }
        assert_eq!(sigmoid_shift(&Tensor::<f64>::zeros(vec![1])).data()[0], 0.0);
        let at2 = sigmoid_shift(&Tensor::<f64>::new(vec![1], vec![2.0]).unwrap());
        let want = 1.0 / (1.0 + (-2.0f64).exp()) - 0.5;
        assert!((at2.data()[0] - want).abs() < 1e-12);
        assert!((at2.data()[0] - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn pixel_shuffle_single_block() {
        let x = Tensor::<f32>::new(vec![1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_shape_and_errors() {
        let x = Tensor::<f32>::zeros(vec![2, 48, 8, 8]);
        assert_eq!(pixel_shuffle(&x, 4).unwrap().shape(), &[2, 3, 32, 32]);
        let bad = Tensor::<f32>::zeros(vec![1, 6, 2, 2]);
        assert!(matches!(
            pixel_shuffle(&bad, 2),
            Err(Error::PixelShuffleChannels { channels: 6, factor: 2 })
        ));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::gaussian(vec![3, 3], 0.0, 1.0, &mut rng);
        let mut eye = Tensor::<f64>::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert!(matmul(&eye, &a).unwrap().max_abs_diff(&a) < 1e-15);
        let z = Tensor::<f64>::zeros(vec![3, 2]);
        let az = matmul(&a, &z).unwrap();
        assert!(az.data().iter().all(|&v| v == 0.0));
        assert!(matmul(&a, &Tensor::<f64>::zeros(vec![4, 2])).is_err());
    }

    #[test]
    fn matmul_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::gaussian(vec![3, 4], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::gaussian(vec![4, 2], 0.0, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((got.data()[i * 2 + j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::gaussian(vec![2, 3], 0.0, 1.0, &mut rng);
        assert_eq!(add(&x, &Tensor::zeros(vec![2, 3])).unwrap(), x);
        assert_eq!(mul(&x, &Tensor::ones(vec![2, 3])).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(vec![3, 2])).is_err());
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::gaussian(vec![2, 2, 3, 3], 0.0, 1.0, &mut rng);
        let b = Tensor::<f32>::gaussian(vec![2, 5, 3, 3], 0.0, 1.0, &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 7, 3, 3]);
        let parts = split_channels(&cat, &[2, 5]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn gram_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::gaussian(vec![2, 3, 6], 0.0, 1.0, &mut rng);
        let a = gram_batched(&x).unwrap();
        for n in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    let ij = a.data()[n * 36 + i * 6 + j];
                    let ji = a.data()[n * 36 + j * 6 + i];
                    assert!((ij - ji).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalized_positions_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::gaussian(vec![1, 4, 5], 0.0, 1.0, &mut rng);
        let u = normalize_positions(&x, 1e-8).unwrap();
        for pos in 0..5 {
            let mut sq = 0.0;
            for c in 0..4 {
                sq += u.data()[c * 5 + pos].powi(2);
            }
            assert!((sq - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reductions() {
        let x = Tensor::<f64>::new(vec![4], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        assert_eq!(abs_mean(&x).item(), 2.5);
        assert_eq!(sq_mean(&x).item(), 7.5);
        assert_eq!(sum(&x).item(), -2.0);
    }
}

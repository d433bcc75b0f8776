//! Forward and backward kernels for the differentiable primitives.
//!
//! These are pure functions over [`Tensor`]s; [`crate::tape`] records which
//! ones ran and replays the backward kernels in reverse order.
//!
//! Convolution is stride 1 with symmetric zero padding, computed as
//! im2col followed by [`gemm_acc`]. Each output element is the sum over
//! `(c_in, ky, kx)` in row-major order starting from `0.0`, which is the
//! order of the obvious quadruple loop.

use crate::error::{Error, Result};
use crate::gemm::{gemm_acc, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize], pad: usize) -> Result<(Self, bool)> {
        let (batch, c_in, h, w, batched) = match *input {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => return Err(Error::shape("conv2d", input, kernels)),
        };
        let [c_out, k_in, kh, kw] = *kernels else {
            return Err(Error::shape("conv2d", input, kernels));
        };
        if k_in != c_in || kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape("conv2d", input, kernels));
        }
        let geometry = ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        };
        Ok((geometry, batched))
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.oh, self.ow]
        } else {
            vec![self.c_out, self.oh, self.ow]
        }
    }

    /// Row `(ci, ky, kx)`, column `(oy, ox)` of the patch matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let pixels = self.out_pixels();
        let mut row = 0;
        for ci in 0..self.c_in {
            let plane = &sample[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * pixels..(row + 1) * pixels];
                    for oy in 0..self.oh {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, slot) in out_row.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            *slot = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], sample_grad: &mut [f64]) {
        let pixels = self.out_pixels();
        let mut row = 0;
        for ci in 0..self.c_in {
            let plane = &mut sample_grad[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * pixels..(row + 1) * pixels];
                    for oy in 0..self.oh {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Stride-1 cross-correlation of `[C_in,H,W]` or `[N,C_in,H,W]` input with
/// `[C_out,C_in,kH,kW]` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, pad: usize) -> Result<Tensor> {
    let (g, batched) = ConvGeometry::new(input.shape(), kernels.shape(), pad)?;
    let patch = g.patch_len();
    let pixels = g.out_pixels();
    let mut out = vec![0.0; g.batch * g.c_out * pixels];
    let mut cols = vec![0.0; patch * pixels];
    for n in 0..g.batch {
        g.im2col(&input.data()[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        gemm_acc(
            g.c_out,
            pixels,
            patch,
            MatRef::row_major(kernels.data(), patch),
            MatRef::row_major(&cols, pixels),
            &mut out[n * g.c_out * pixels..(n + 1) * g.c_out * pixels],
        );
    }
    Tensor::new(g.out_shape(batched), out)
}

/// Gradients of [`conv2d`] with respect to the input and/or the kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    pad: usize,
    grad_out: &Tensor,
    want_input: bool,
    want_kernels: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (g, batched) = ConvGeometry::new(input.shape(), kernels.shape(), pad)?;
    if grad_out.shape() != g.out_shape(batched).as_slice() {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &g.out_shape(batched)));
    }
    let patch = g.patch_len();
    let pixels = g.out_pixels();
    let mut d_input = want_input.then(|| vec![0.0; input.len()]);
    let mut d_kernels = want_kernels.then(|| vec![0.0; kernels.len()]);
    let mut cols = vec![0.0; patch * pixels];
    let mut d_cols = vec![0.0; if want_input { patch * pixels } else { 0 }];
    for n in 0..g.batch {
        let d_out = &grad_out.data()[n * g.c_out * pixels..(n + 1) * g.c_out * pixels];
        if let Some(dk) = d_kernels.as_mut() {
            g.im2col(&input.data()[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            gemm_acc(
                g.c_out,
                patch,
                pixels,
                MatRef::row_major(d_out, pixels),
                MatRef::transposed(&cols, pixels),
                dk,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            d_cols.fill(0.0);
            gemm_acc(
                patch,
                pixels,
                g.c_out,
                MatRef::transposed(kernels.data(), patch),
                MatRef::row_major(d_out, pixels),
                &mut d_cols,
            );
            g.col2im_add(&d_cols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    let d_input = d_input.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
    let d_kernels = d_kernels
        .map(|d| Tensor::new(kernels.shape().to_vec(), d))
        .transpose()?;
    Ok((d_input, d_kernels))
}

fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        [n, c, h, w] => Ok((n * c, h, w)),
        _ => Err(Error::shape(op, shape, &[0, 0, 0])),
    }
}

/// Non-overlapping 2x2 max pooling. Returns the pooled tensor and, for every
/// output element, the flat input index it was taken from. Ties go to the
/// first element in row-major window order.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (planes, h, w) = spatial_dims("maxpool2", input.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", input.shape(), &[2, 2]));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok((Tensor::new(shape, out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool2_backward", grad_out.shape(), &[argmax.len()]));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &d) in argmax.iter().zip(grad_out.data()) {
        g[idx] += d;
    }
    Ok(grad)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

fn affine_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let [outputs, inputs] = *weights.shape() else {
        return Err(Error::shape("affine", input.shape(), weights.shape()));
    };
    let rows = match *input.shape() {
        [i] if i == inputs => 1,
        [n, i] if i == inputs => n,
        _ => return Err(Error::shape("affine", input.shape(), weights.shape())),
    };
    if bias.shape() != [outputs] {
        return Err(Error::shape("affine", bias.shape(), &[outputs]));
    }
    Ok((rows, inputs, outputs))
}

/// `input · weightsᵀ + bias` for `[I]` or `[N,I]` input and `[O,I]` weights.
pub fn affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, inputs, outputs) = affine_dims(input, weights, bias)?;
    let mut out = vec![0.0; rows * outputs];
    gemm_acc(
        rows,
        outputs,
        inputs,
        MatRef::row_major(input.data(), inputs),
        MatRef::transposed(weights.data(), inputs),
        &mut out,
    );
    for row in out.chunks_exact_mut(outputs) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    let shape = if input.shape().len() == 1 {
        vec![outputs]
    } else {
        vec![rows, outputs]
    };
    Tensor::new(shape, out)
}

/// Returns `(d_input, d_weights, d_bias)`, each only when requested.
pub fn affine_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    want: [bool; 3],
) -> Result<[Option<Tensor>; 3]> {
    let (rows, inputs, outputs) = affine_dims(input, weights, bias)?;
    if grad_out.len() != rows * outputs {
        return Err(Error::shape("affine_backward", grad_out.shape(), &[rows, outputs]));
    }
    let d = grad_out.data();
    let d_input = if want[0] {
        let mut dx = vec![0.0; rows * inputs];
        gemm_acc(
            rows,
            inputs,
            outputs,
            MatRef::row_major(d, outputs),
            MatRef::row_major(weights.data(), inputs),
            &mut dx,
        );
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    let d_weights = if want[1] {
        let mut dw = vec![0.0; outputs * inputs];
        gemm_acc(
            outputs,
            inputs,
            rows,
            MatRef::transposed(d, outputs),
            MatRef::row_major(input.data(), inputs),
            &mut dw,
        );
        Some(Tensor::new(weights.shape().to_vec(), dw)?)
    } else {
        None
    };
    let d_bias = if want[2] {
        let mut db = vec![0.0; outputs];
        for row in d.chunks_exact(outputs) {
            for (b, g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
        Some(Tensor::new(vec![outputs], db)?)
    } else {
        None
    };
    Ok([d_input, d_weights, d_bias])
}

/// Adds `bias[c]` to every element of channel `c` of a `[N,C,H,W]` or `[C,H,W]` tensor.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let channels = channel_count(input)?;
    if bias.shape() != [channels] {
        return Err(Error::shape("add_channel_bias", input.shape(), bias.shape()));
    }
    let plane = plane_len(input);
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let b = bias.data()[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

pub fn channel_bias_backward(grad_out: &Tensor, channels: usize) -> Tensor {
    let plane = plane_len(grad_out);
    let mut db = vec![0.0; channels];
    for (i, chunk) in grad_out.data().chunks_exact(plane).enumerate() {
        db[i % channels] += chunk.iter().sum::<f64>();
    }
    Tensor::new(vec![channels], db).expect("channel count")
}

pub(crate) fn channel_count(t: &Tensor) -> Result<usize> {
    match *t.shape() {
        [c, _, _] | [_, c, _, _] => Ok(c),
        _ => Err(Error::shape("channels", t.shape(), &[0, 0, 0])),
    }
}

pub(crate) fn plane_len(t: &Tensor) -> usize {
    let s = t.shape();
    s[s.len() - 2] * s[s.len() - 1]
}

/// `-log softmax(logits)[label]` and its gradient `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let (losses, grad) = softmax_cross_entropy_batch(logits, &[label])?;
    Ok((losses[0], grad))
}

/// Per-row cross entropy for `[N,M]` (or `[M]` with one label) logits, and the
/// gradient of the *summed* loss.
pub fn softmax_cross_entropy_batch(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let classes = *logits.shape().last().unwrap_or(&0);
    let rows = logits.len().checked_div(classes).unwrap_or(0);
    if rows != labels.len() || classes == 0 {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut losses = Vec::with_capacity(rows);
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Index { index: label, classes });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        losses.push(total.ln() + max - row[label]);
        for (j, e) in exps.iter().enumerate() {
            let p = e / total;
            grad.push(if j == label { p - 1.0 } else { p });
        }
    }
    Ok((losses, Tensor::new(logits.shape().to_vec(), grad)?))
}

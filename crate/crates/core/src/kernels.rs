//! Contraction kernels shared by the forward and backward passes.
//!
//! Every kernel is generic over the accumulation type so the same loop
//! order runs in binary64 and binary32. Accumulation order is fixed, which
//! keeps 32-bit results reproducible bit for bit.

use std::ops::{Add, AddAssign, Mul};

use crate::precision::{PrecisionKind, PrecisionMode};

pub(crate) trait Real:
    Copy + Default + PartialOrd + Add<Output = Self> + Mul<Output = Self> + AddAssign
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Runs a two-operand contraction in the storage format of `mode`.
pub(crate) fn contract(
    mode: PrecisionMode,
    a: &[f64],
    b: &[f64],
    wide: impl FnOnce(&[f64], &[f64]) -> Vec<f64>,
    narrow: impl FnOnce(&[f32], &[f32]) -> Vec<f32>,
) -> Vec<f64> {
    match mode.kind {
        PrecisionKind::Full64 => wide(a, b),
        _ => {
            let a32: Vec<f32> = a.iter().map(|&v| mode.contraction_operand(v)).collect();
            let b32: Vec<f32> = b.iter().map(|&v| mode.contraction_operand(v)).collect();
            narrow(&a32, &b32)
                .into_iter()
                .map(|v| mode.flush32(v) as f64)
                .collect()
        }
    }
}

/// Valid cross-correlation, stride 1. `kernel` is `[F, C, kh, kw]`.
pub(crate) fn conv2d_forward<T: Real>(input: &[T], kernel: &[T], d: ConvDims) -> Vec<T> {
    let (oh, ow) = (d.out_h, d.out_w);
    let mut out = vec![T::default(); d.filters * oh * ow];
    for f in 0..d.filters {
        let out_f = &mut out[f * oh * ow..(f + 1) * oh * ow];
        for c in 0..d.channels {
            let in_c = &input[c * d.height * d.width..(c + 1) * d.height * d.width];
            let k_fc = &kernel[(f * d.channels + c) * d.kh * d.kw..][..d.kh * d.kw];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let kv = k_fc[i * d.kw + j];
                    for y in 0..oh {
                        let row = &in_c[(y + i) * d.width + j..][..ow];
                        let orow = &mut out_f[y * ow..(y + 1) * ow];
                        for (o, &v) in orow.iter_mut().zip(row) {
                            *o += kv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub(crate) fn conv2d_backward_input<T: Real>(grad: &[T], kernel: &[T], d: ConvDims) -> Vec<T> {
    let (oh, ow) = (d.out_h, d.out_w);
    let mut din = vec![T::default(); d.channels * d.height * d.width];
    for f in 0..d.filters {
        let g_f = &grad[f * oh * ow..(f + 1) * oh * ow];
        for c in 0..d.channels {
            let din_c = &mut din[c * d.height * d.width..(c + 1) * d.height * d.width];
            let k_fc = &kernel[(f * d.channels + c) * d.kh * d.kw..][..d.kh * d.kw];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let kv = k_fc[i * d.kw + j];
                    for y in 0..oh {
                        let grow = &g_f[y * ow..(y + 1) * ow];
                        let drow = &mut din_c[(y + i) * d.width + j..][..ow];
                        for (o, &g) in drow.iter_mut().zip(grow) {
                            *o += g * kv;
                        }
                    }
                }
            }
        }
    }
    din
}

/// Gradient of [`conv2d_forward`] with respect to its kernel.
pub(crate) fn conv2d_backward_kernel<T: Real>(grad: &[T], input: &[T], d: ConvDims) -> Vec<T> {
    let (oh, ow) = (d.out_h, d.out_w);
    let mut dk = vec![T::default(); d.filters * d.channels * d.kh * d.kw];
    for f in 0..d.filters {
        let g_f = &grad[f * oh * ow..(f + 1) * oh * ow];
        for c in 0..d.channels {
            let in_c = &input[c * d.height * d.width..(c + 1) * d.height * d.width];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let mut lanes = [T::default(); 8];
                    for y in 0..oh {
                        let grow = &g_f[y * ow..(y + 1) * ow];
                        let irow = &in_c[(y + i) * d.width + j..][..ow];
                        let mut gc = grow.chunks_exact(8);
                        let mut ic = irow.chunks_exact(8);
                        for (gs, is) in (&mut gc).zip(&mut ic) {
                            for l in 0..8 {
                                lanes[l] += gs[l] * is[l];
                            }
                        }
                        for (l, (&g, &v)) in gc.remainder().iter().zip(ic.remainder()).enumerate() {
                            lanes[l] += g * v;
                        }
                    }
                    let mut acc = T::default();
                    for l in lanes {
                        acc += l;
                    }
                    dk[((f * d.channels + c) * d.kh + i) * d.kw + j] = acc;
                }
            }
        }
    }
    dk
}

/// Transposed convolution without padding. `kernel` is `[C, F, kh, kw]`;
/// output extents come from `d.out_h`/`d.out_w` (which may include output
/// padding on the bottom/right edges).
pub(crate) fn conv_transpose_forward<T: Real>(input: &[T], kernel: &[T], d: ConvDims) -> Vec<T> {
    let (oh, ow, s) = (d.out_h, d.out_w, d.stride);
    let mut out = vec![T::default(); d.filters * oh * ow];
    for c in 0..d.channels {
        let in_c = &input[c * d.height * d.width..(c + 1) * d.height * d.width];
        for f in 0..d.filters {
            let out_f = &mut out[f * oh * ow..(f + 1) * oh * ow];
            let k_cf = &kernel[(c * d.filters + f) * d.kh * d.kw..][..d.kh * d.kw];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let kv = k_cf[i * d.kw + j];
                    for y in 0..d.height {
                        let orow = &mut out_f[(y * s + i) * ow..];
                        for x in 0..d.width {
                            orow[x * s + j] += in_c[y * d.width + x] * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward_input<T: Real>(
    grad: &[T],
    kernel: &[T],
    d: ConvDims,
) -> Vec<T> {
    let (oh, ow, s) = (d.out_h, d.out_w, d.stride);
    let mut din = vec![T::default(); d.channels * d.height * d.width];
    for c in 0..d.channels {
        let din_c = &mut din[c * d.height * d.width..(c + 1) * d.height * d.width];
        for f in 0..d.filters {
            let g_f = &grad[f * oh * ow..(f + 1) * oh * ow];
            let k_cf = &kernel[(c * d.filters + f) * d.kh * d.kw..][..d.kh * d.kw];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let kv = k_cf[i * d.kw + j];
                    for y in 0..d.height {
                        let grow = &g_f[(y * s + i) * ow..];
                        for x in 0..d.width {
                            din_c[y * d.width + x] += grow[x * s + j] * kv;
                        }
                    }
                }
            }
        }
    }
    din
}

pub(crate) fn conv_transpose_backward_kernel<T: Real>(
    grad: &[T],
    input: &[T],
    d: ConvDims,
) -> Vec<T> {
    let (oh, ow, s) = (d.out_h, d.out_w, d.stride);
    let mut dk = vec![T::default(); d.channels * d.filters * d.kh * d.kw];
    for c in 0..d.channels {
        let in_c = &input[c * d.height * d.width..(c + 1) * d.height * d.width];
        for f in 0..d.filters {
            let g_f = &grad[f * oh * ow..(f + 1) * oh * ow];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let mut acc = T::default();
                    for y in 0..d.height {
                        let grow = &g_f[(y * s + i) * ow..];
                        for x in 0..d.width {
                            acc += in_c[y * d.width + x] * grow[x * s + j];
                        }
                    }
                    dk[((c * d.filters + f) * d.kh + i) * d.kw + j] = acc;
                }
            }
        }
    }
    dk
}

/// `W x` for `W: [rows, cols]`, accumulated left to right.
pub(crate) fn matvec<T: Real>(weight: &[T], x: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| {
            let mut acc = T::default();
            for (&w, &v) in weight[r * cols..(r + 1) * cols].iter().zip(x) {
                acc += w * v;
            }
            acc
        })
        .collect()
}

/// `g^T W`, accumulated over rows in ascending order for every column.
pub(crate) fn vecmat<T: Real>(g: &[T], weight: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); cols];
    for r in 0..rows {
        let gr = g[r];
        for (o, &w) in out.iter_mut().zip(&weight[r * cols..(r + 1) * cols]) {
            *o += gr * w;
        }
    }
    out
}

/// Outer product `g x^T` (one product per entry, no accumulation).
pub(crate) fn outer<T: Real>(g: &[T], x: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(g.len() * x.len());
    for &gr in g {
        out.extend(x.iter().map(|&v| gr * v));
    }
    out
}

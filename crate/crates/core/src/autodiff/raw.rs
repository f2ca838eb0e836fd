//! Plain array primitives shared by inference and the tape.
//!
//! Layout conventions: images and feature blocks are channel-first
//! `(C, H, W)`; convolution weights are stored as `(C_out, C_in*k*k)`
//! matrices so both the forward and the weight-gradient reduce to one
//! GEMM against the im2col buffer.

use super::Elem;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `(C, H, W)` into `(C*k*k, HO*WO)` patches.
pub fn im2col<T: Elem>(
    input: ArrayView3<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (c, h, w) = input.dim();
    let ho = conv_out_dim(h, kernel, stride, pad);
    let wo = conv_out_dim(w, kernel, stride, pad);
    let mut cols = Array2::<T>::zeros((c * kernel * kernel, ho * wo));
    for ci in 0..c {
        let plane = input.index_axis(Axis(0), ci);
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let mut out_row = cols.row_mut(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out_row[oi * wo + oj] = plane[(ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold `(C*k*k, HO*WO)` patch gradients back onto a `(C, H, W)` grid.
pub fn col2im<T: Elem>(
    cols: ArrayView2<T>,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let ho = conv_out_dim(h, kernel, stride, pad);
    let wo = conv_out_dim(w, kernel, stride, pad);
    let mut out = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = out.index_axis_mut(Axis(0), ci);
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = cols.row((ci * kernel + ki) * kernel + kj);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        plane[(ii as usize, jj as usize)] =
                            plane[(ii as usize, jj as usize)] + row[oi * wo + oj];
                    }
                }
            }
        }
    }
    out
}

/// 3x3-style convolution; returns the output and the im2col buffer
/// (the buffer is reused by the backward pass).
pub fn conv2d<T: Elem>(
    input: ArrayView3<T>,
    weight: ArrayView2<T>,
    bias: Option<ArrayView1<T>>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Array3<T>, Array2<T>) {
    let (_, h, w) = input.dim();
    let ho = conv_out_dim(h, kernel, stride, pad);
    let wo = conv_out_dim(w, kernel, stride, pad);
    let c_out = weight.nrows();
    let cols = im2col(input, kernel, stride, pad);
    let mut flat = weight.dot(&cols);
    if let Some(b) = bias {
        for (mut row, &bv) in flat.rows_mut().into_iter().zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    let out = flat
        .into_shape_with_order((c_out, ho, wo))
        .expect("conv output reshape");
    (out, cols)
}

/// Gradients of a convolution given the upstream gradient and the cached
/// im2col buffer. Returns `(d_input, d_weight, d_bias)`; `d_input` is
/// computed only when `need_input_grad` is set (it is the expensive one).
pub fn conv2d_backward<T: Elem>(
    grad_out: ArrayView3<T>,
    cols: &Array2<T>,
    weight: ArrayView2<T>,
    in_shape: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Array3<T>>, Array2<T>, Array1<T>) {
    let (c_out, ho, wo) = grad_out.dim();
    let g2 = grad_out
        .to_shape((c_out, ho * wo))
        .expect("grad reshape")
        .into_owned();
    let d_weight = g2.dot(&cols.t());
    let d_bias = g2.sum_axis(Axis(1));
    let d_input = if need_input_grad {
        let d_cols = weight.t().dot(&g2);
        let (c, h, w) = in_shape;
        Some(col2im(d_cols.view(), c, h, w, kernel, stride, pad))
    } else {
        None
    };
    (d_input, d_weight, d_bias)
}

/// Global average pooling: spatial mean per channel.
pub fn gap<T: Elem>(f: ArrayView3<T>) -> Array1<T> {
    let (_, h, w) = f.dim();
    let inv = T::from_f64(1.0 / (h * w) as f64);
    f.sum_axis(Axis(2)).sum_axis(Axis(1)) * inv
}

pub fn sigmoid<T: Elem>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax<T: Elem>(z: ArrayView1<T>) -> Array1<T> {
    let m = z.fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

pub fn log_softmax<T: Elem>(z: ArrayView1<T>) -> Array1<T> {
    let m = z.fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = z.fold(T::zero(), |a, &b| a + (b - m).exp()).ln() + m;
    z.mapv(|v| v - lse)
}

/// ReLU followed by max-normalization to `[0, 1]`.
///
/// When the rectified map is identically zero the normalized map is
/// defined as all-zero (continuous limit of the quotient).
pub fn max_normalize<T: Elem>(raw: ArrayView2<T>) -> Array2<T> {
    let relu = raw.mapv(|v| v.max(T::zero()));
    let m = relu.fold(T::zero(), |a, &b| a.max(b));
    if m > T::zero() {
        relu / m
    } else {
        relu
    }
}

/// Bilinear upsampling by an integer factor (half-pixel alignment).
pub fn bilinear_upsample<T: Elem>(x: ArrayView3<T>, factor: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    let (hh, ww) = (h * factor, w * factor);
    let mut out = Array3::<T>::zeros((c, hh, ww));
    for oi in 0..hh {
        let (i0, i1, fi) = src_coords(oi, factor, h);
        for oj in 0..ww {
            let (j0, j1, fj) = src_coords(oj, factor, w);
            for ci in 0..c {
                let v00 = x[(ci, i0, j0)].to_f64();
                let v01 = x[(ci, i0, j1)].to_f64();
                let v10 = x[(ci, i1, j0)].to_f64();
                let v11 = x[(ci, i1, j1)].to_f64();
                let top = v00 * (1.0 - fj) + v01 * fj;
                let bot = v10 * (1.0 - fj) + v11 * fj;
                out[(ci, oi, oj)] = T::from_f64(top * (1.0 - fi) + bot * fi);
            }
        }
    }
    out
}

/// Transpose of [`bilinear_upsample`]: scatters the upstream gradient
/// back onto the low-resolution grid with the same interpolation weights.
pub fn bilinear_upsample_backward<T: Elem>(
    grad_out: ArrayView3<T>,
    in_dims: (usize, usize, usize),
    factor: usize,
) -> Array3<T> {
    let (c, h, w) = in_dims;
    let (hh, ww) = (h * factor, w * factor);
    let mut out = Array3::<T>::zeros((c, h, w));
    for oi in 0..hh {
        let (i0, i1, fi) = src_coords(oi, factor, h);
        for oj in 0..ww {
            let (j0, j1, fj) = src_coords(oj, factor, w);
            for ci in 0..c {
                let g = grad_out[(ci, oi, oj)].to_f64();
                out[(ci, i0, j0)] = out[(ci, i0, j0)] + T::from_f64(g * (1.0 - fi) * (1.0 - fj));
                out[(ci, i0, j1)] = out[(ci, i0, j1)] + T::from_f64(g * (1.0 - fi) * fj);
                out[(ci, i1, j0)] = out[(ci, i1, j0)] + T::from_f64(g * fi * (1.0 - fj));
                out[(ci, i1, j1)] = out[(ci, i1, j1)] + T::from_f64(g * fi * fj);
            }
        }
    }
    out
}

/// Source cell pair and interpolation fraction for output index `oi`.
fn src_coords(oi: usize, factor: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = (oi as f64 + 0.5) / factor as f64 - 0.5;
    let clamped = pos.clamp(0.0, (src_len - 1) as f64);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, clamped - i0 as f64)
}

//! Grouped 2-D cross-correlation kernels (forward and the three backward products).
//!
//! Every output cell accumulates in a fixed index order, so the result is
//! bitwise identical whether planes are computed serially or in parallel.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::{numel, ConvGeometry, Real, Tensor};

/// Fault injection for the gradient-check mutation test: when set, the
/// input gradient of every convolution is perturbed by 1%.
#[doc(hidden)]
pub static CONV_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

const PAR_THRESHOLD: usize = 1 << 14;

/// Runs `f(plane_index, plane)` over consecutive chunks, in parallel when the
/// job is large enough to pay for it.
pub(crate) fn for_each_plane<T: Send>(
    buf: &mut [T],
    plane_len: usize,
    work: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        buf.par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(i, p)| f(i, p));
    } else {
        buf.chunks_mut(plane_len)
            .enumerate()
            .for_each(|(i, p)| f(i, p));
    }
}

/// Valid output column range `[lo, hi)` for kernel tap `kw`.
#[inline]
fn valid_range(
    tap: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    // input index = o*stride + tap - pad must lie in [0, in_len)
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > tap {
        ((in_len - 1 + pad - tap) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `out_row[o] += w * in_row[o*stride + tap - pad]` over the valid range.
#[inline]
fn axpy_row<T: Real>(out_row: &mut [T], in_row: &[T], w: T, tap: usize, geo: ConvGeometry) {
    let (lo, hi) = valid_range(tap, geo.padding, geo.stride, in_row.len(), out_row.len());
    if lo >= hi {
        return;
    }
    if geo.stride == 1 {
        let off = lo + tap - geo.padding;
        let src = &in_row[off..off + (hi - lo)];
        for (o, &v) in out_row[lo..hi].iter_mut().zip(src) {
            *o = *o + w * v;
        }
    } else {
        for o in lo..hi {
            out_row[o] = out_row[o] + w * in_row[o * geo.stride + tap - geo.padding];
        }
    }
}

/// Transposed form: `in_row[o*stride + tap - pad] += w * out_row[o]`.
#[inline]
fn axpy_row_t<T: Real>(in_row: &mut [T], out_row: &[T], w: T, tap: usize, geo: ConvGeometry) {
    let (lo, hi) = valid_range(tap, geo.padding, geo.stride, in_row.len(), out_row.len());
    if lo >= hi {
        return;
    }
    if geo.stride == 1 {
        let off = lo + tap - geo.padding;
        let dst = &mut in_row[off..off + (hi - lo)];
        for (d, &g) in dst.iter_mut().zip(&out_row[lo..hi]) {
            *d = *d + w * g;
        }
    } else {
        for (o, &g) in out_row.iter().enumerate().take(hi).skip(lo) {
            let i = o * geo.stride + tap - geo.padding;
            in_row[i] = in_row[i] + w * g;
        }
    }
}

#[inline]
fn dot_row<T: Real>(out_row: &[T], in_row: &[T], tap: usize, geo: ConvGeometry) -> T {
    let (lo, hi) = valid_range(tap, geo.padding, geo.stride, in_row.len(), out_row.len());
    let mut acc = T::zero();
    for o in lo..hi {
        acc = acc + out_row[o] * in_row[o * geo.stride + tap - geo.padding];
    }
    acc
}

#[inline]
fn input_row(oy: usize, tap: usize, geo: ConvGeometry, h: usize) -> Option<usize> {
    let iy = (oy * geo.stride + tap) as isize - geo.padding as isize;
    (iy >= 0 && (iy as usize) < h).then_some(iy as usize)
}

pub fn forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let out_shape = geo.output_shape(x.shape(), kernel.shape())?;
    let [_, c_in, h, w] = x.shape();
    let [c_out, cpg, k, _] = kernel.shape();
    let [_, _, oh, ow] = out_shape;
    let opg = c_out / geo.groups;
    let kd = kernel.data();
    let mut out = vec![T::zero(); numel(&out_shape)];
    let work = numel(&out_shape) * cpg * k * k;
    for_each_plane(&mut out, oh * ow, work, |idx, plane| {
        let (b, oc) = (idx / c_out, idx % c_out);
        let grp = oc / opg;
        if let Some(bias) = bias {
            plane.fill(bias[oc]);
        }
        for icg in 0..cpg {
            let ic = grp * cpg + icg;
            let xin = &x.data()[(b * c_in + ic) * h * w..][..h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let wv = kd[((oc * cpg + icg) * k + kh) * k + kw];
                    for oy in 0..oh {
                        if let Some(iy) = input_row(oy, kh, geo, h) {
                            axpy_row(
                                &mut plane[oy * ow..(oy + 1) * ow],
                                &xin[iy * w..(iy + 1) * w],
                                wv,
                                kw,
                                geo,
                            );
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

pub fn backward_input<T: Real>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    x_shape: [usize; 4],
    geo: ConvGeometry,
) -> Tensor<T> {
    let [_, c_in, h, w] = x_shape;
    let [c_out, cpg, k, _] = kernel.shape();
    let [_, _, oh, ow] = grad_out.shape();
    let opg = c_out / geo.groups;
    let kd = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); numel(&x_shape)];
    let work = grad_out.numel() * cpg * k * k;
    for_each_plane(&mut gx, h * w, work, |idx, plane| {
        let (b, ic) = (idx / c_in, idx % c_in);
        let grp = ic / cpg;
        let icg = ic % cpg;
        for oc in grp * opg..(grp + 1) * opg {
            let gp = &g[(b * c_out + oc) * oh * ow..][..oh * ow];
            for kh in 0..k {
                for kw in 0..k {
                    let wv = kd[((oc * cpg + icg) * k + kh) * k + kw];
                    for oy in 0..oh {
                        if let Some(iy) = input_row(oy, kh, geo, h) {
                            axpy_row_t(
                                &mut plane[iy * w..(iy + 1) * w],
                                &gp[oy * ow..(oy + 1) * ow],
                                wv,
                                kw,
                                geo,
                            );
                        }
                    }
                }
            }
        }
    });
    if CONV_BACKWARD_FAULT.load(Ordering::Relaxed) {
        for v in gx.iter_mut() {
            *v = *v * T::of(1.01);
        }
    }
    Tensor::from_vec(x_shape, gx).expect("input gradient shape")
}

pub fn backward_kernel<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    kernel_shape: [usize; 4],
    geo: ConvGeometry,
) -> Tensor<T> {
    let [n, c_in, h, w] = x.shape();
    let [c_out, cpg, k, _] = kernel_shape;
    let [_, _, oh, ow] = grad_out.shape();
    let opg = c_out / geo.groups;
    let g = grad_out.data();
    let mut gk = vec![T::zero(); numel(&kernel_shape)];
    let work = grad_out.numel() * cpg * k * k;
    for_each_plane(&mut gk, cpg * k * k, work, |oc, block| {
        let grp = oc / opg;
        for icg in 0..cpg {
            let ic = grp * cpg + icg;
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = T::zero();
                    for b in 0..n {
                        let gp = &g[(b * c_out + oc) * oh * ow..][..oh * ow];
                        let xin = &x.data()[(b * c_in + ic) * h * w..][..h * w];
                        for oy in 0..oh {
                            if let Some(iy) = input_row(oy, kh, geo, h) {
                                acc = acc
                                    + dot_row(
                                        &gp[oy * ow..(oy + 1) * ow],
                                        &xin[iy * w..(iy + 1) * w],
                                        kw,
                                        geo,
                                    );
                            }
                        }
                    }
                    block[(icg * k + kh) * k + kw] = acc;
                }
            }
        }
    });
    Tensor::from_vec(kernel_shape, gk).expect("kernel gradient shape")
}

pub fn backward_bias<T: Real>(grad_out: &Tensor<T>) -> Vec<T> {
    let [n, c, _, _] = grad_out.shape();
    (0..c)
        .map(|oc| {
            let mut acc = T::zero();
            for b in 0..n {
                acc = acc + grad_out.plane(b, oc).iter().copied().sum::<T>();
            }
            acc
        })
        .collect()
}

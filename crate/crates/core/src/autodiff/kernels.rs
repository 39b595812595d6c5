//! Forward and backward kernels for the spatial primitives.
//!
//! Every kernel accumulates in a fixed loop order, so results are bitwise
//! reproducible for identical inputs.

use crate::tensor::Scalar;

/// Valid output range `[lo, hi)` along one axis for a tap offset `d`.
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + i) * self.k + ky) * self.k + kx
    }
}

/// Same-size convolution with zero padding `k / 2`.
pub(crate) fn conv2d_forward<T: Scalar>(d: ConvDims, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let hw = d.plane();
    let p = d.pad();
    let mut out = vec![T::zero(); d.n * d.c_out * hw];
    for b in 0..d.n {
        for o in 0..d.c_out {
            let out_plane = &mut out[(b * d.c_out + o) * hw..][..hw];
            out_plane.fill(bias[o]);
            for i in 0..d.c_in {
                let in_plane = &x[(b * d.c_in + i) * hw..][..hw];
                for ky in 0..d.k {
                    let dy = ky as isize - p;
                    let (y0, y1) = tap_range(d.h, dy);
                    for kx in 0..d.k {
                        let dx = kx as isize - p;
                        let (x0, x1) = tap_range(d.w, dx);
                        let wv = weight[d.widx(o, i, ky, kx)];
                        for y in y0..y1 {
                            let src_row = (y as isize + dy) as usize * d.w;
                            let src = &in_plane[(src_row as isize + x0 as isize + dx) as usize..]
                                [..x1 - x0];
                            axpy(&mut out_plane[y * d.w + x0..y * d.w + x1], wv, src);
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<T: Scalar>(d: ConvDims, gout: &[T], weight: &[T]) -> Vec<T> {
    let hw = d.plane();
    let p = d.pad();
    let mut gx = vec![T::zero(); d.n * d.c_in * hw];
    for b in 0..d.n {
        for i in 0..d.c_in {
            let gx_plane = &mut gx[(b * d.c_in + i) * hw..][..hw];
            for o in 0..d.c_out {
                let g_plane = &gout[(b * d.c_out + o) * hw..][..hw];
                for ky in 0..d.k {
                    let dy = ky as isize - p;
                    let (y0, y1) = tap_range(d.h, dy);
                    for kx in 0..d.k {
                        let dx = kx as isize - p;
                        let (x0, x1) = tap_range(d.w, dx);
                        let wv = weight[d.widx(o, i, ky, kx)];
                        for y in y0..y1 {
                            let dst_row = (y as isize + dy) as usize * d.w;
                            let start = (dst_row as isize + x0 as isize + dx) as usize;
                            axpy(
                                &mut gx_plane[start..start + (x1 - x0)],
                                wv,
                                &g_plane[y * d.w + x0..y * d.w + x1],
                            );
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Returns (weight gradient, bias gradient).
pub(crate) fn conv2d_backward_params<T: Scalar>(
    d: ConvDims,
    gout: &[T],
    x: &[T],
) -> (Vec<T>, Vec<T>) {
    let hw = d.plane();
    let p = d.pad();
    let mut gw = vec![T::zero(); d.c_out * d.c_in * d.k * d.k];
    let mut gb = vec![T::zero(); d.c_out];
    for o in 0..d.c_out {
        for b in 0..d.n {
            let g_plane = &gout[(b * d.c_out + o) * hw..][..hw];
            gb[o] = g_plane.iter().fold(gb[o], |acc, &v| acc + v);
            for i in 0..d.c_in {
                let in_plane = &x[(b * d.c_in + i) * hw..][..hw];
                for ky in 0..d.k {
                    let dy = ky as isize - p;
                    let (y0, y1) = tap_range(d.h, dy);
                    for kx in 0..d.k {
                        let dx = kx as isize - p;
                        let (x0, x1) = tap_range(d.w, dx);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let src_row = (y as isize + dy) as usize * d.w;
                            let start = (src_row as isize + x0 as isize + dx) as usize;
                            acc = acc
                                + dot(
                                    &g_plane[y * d.w + x0..y * d.w + x1],
                                    &in_plane[start..start + (x1 - x0)],
                                );
                        }
                        let idx = d.widx(o, i, ky, kx);
                        gw[idx] = gw[idx] + acc;
                    }
                }
            }
        }
    }
    (gw, gb)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct UpDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl UpDims {
    fn widx(&self, i: usize, o: usize, a: usize, c: usize) -> usize {
        ((i * self.c_out + o) * 2 + a) * 2 + c
    }
}

/// Stride-2, 2×2 transposed convolution. Output is N×C_out×2H×2W.
pub(crate) fn upconv_forward<T: Scalar>(d: UpDims, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let hw = d.h * d.w;
    let ow = 2 * d.w;
    let ohw = 4 * hw;
    let mut out = vec![T::zero(); d.n * d.c_out * ohw];
    let mut row = vec![T::zero(); ow];
    for b in 0..d.n {
        for o in 0..d.c_out {
            let out_plane = &mut out[(b * d.c_out + o) * ohw..][..ohw];
            out_plane.fill(bias[o]);
            for i in 0..d.c_in {
                let in_plane = &x[(b * d.c_in + i) * hw..][..hw];
                for a in 0..2 {
                    let w0 = weight[d.widx(i, o, a, 0)];
                    let w1 = weight[d.widx(i, o, a, 1)];
                    for y in 0..d.h {
                        let src = &in_plane[y * d.w..(y + 1) * d.w];
                        for (pair, &v) in row.chunks_exact_mut(2).zip(src) {
                            pair[0] = w0 * v;
                            pair[1] = w1 * v;
                        }
                        let dst = &mut out_plane[(2 * y + a) * ow..][..ow];
                        for (d, &r) in dst.iter_mut().zip(&row) {
                            *d = *d + r;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upconv_backward_input<T: Scalar>(d: UpDims, gout: &[T], weight: &[T]) -> Vec<T> {
    let hw = d.h * d.w;
    let ow = 2 * d.w;
    let ohw = 4 * hw;
    let mut gx = vec![T::zero(); d.n * d.c_in * hw];
    for b in 0..d.n {
        for i in 0..d.c_in {
            let gx_plane = &mut gx[(b * d.c_in + i) * hw..][..hw];
            for o in 0..d.c_out {
                let g_plane = &gout[(b * d.c_out + o) * ohw..][..ohw];
                for a in 0..2 {
                    let w0 = weight[d.widx(i, o, a, 0)];
                    let w1 = weight[d.widx(i, o, a, 1)];
                    for y in 0..d.h {
                        let src = &g_plane[(2 * y + a) * ow..][..ow];
                        let dst = &mut gx_plane[y * d.w..(y + 1) * d.w];
                        for (g, pair) in dst.iter_mut().zip(src.chunks_exact(2)) {
                            *g = *g + w0 * pair[0] + w1 * pair[1];
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn upconv_backward_params<T: Scalar>(
    d: UpDims,
    gout: &[T],
    x: &[T],
) -> (Vec<T>, Vec<T>) {
    let hw = d.h * d.w;
    let ow = 2 * d.w;
    let ohw = 4 * hw;
    let mut gw = vec![T::zero(); d.c_in * d.c_out * 4];
    let mut gb = vec![T::zero(); d.c_out];
    for b in 0..d.n {
        for o in 0..d.c_out {
            let g_plane = &gout[(b * d.c_out + o) * ohw..][..ohw];
            gb[o] = g_plane.iter().fold(gb[o], |acc, &v| acc + v);
            for i in 0..d.c_in {
                let in_plane = &x[(b * d.c_in + i) * hw..][..hw];
                for a in 0..2 {
                    let mut acc0 = T::zero();
                    let mut acc1 = T::zero();
                    for y in 0..d.h {
                        let src = &in_plane[y * d.w..(y + 1) * d.w];
                        let g_row = &g_plane[(2 * y + a) * ow..][..ow];
                        for (&v, pair) in src.iter().zip(g_row.chunks_exact(2)) {
                            acc0 = acc0 + v * pair[0];
                            acc1 = acc1 + v * pair[1];
                        }
                    }
                    let i0 = d.widx(i, o, a, 0);
                    gw[i0] = gw[i0] + acc0;
                    gw[i0 + 1] = gw[i0 + 1] + acc1;
                }
            }
        }
    }
    (gw, gb)
}

/// 2×2 stride-2 max pooling over `planes` planes of size h×w.
///
/// Returns the pooled values and, per output element, the flat input index of
/// the window maximum (first in scan order on ties).
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for idx in [
                    base + 2 * y * w + 2 * xx + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ] {
                    if x[idx] > x[best] || x[idx].is_nan() {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

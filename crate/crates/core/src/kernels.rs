//! Hot numeric kernels: GEMM variants and direct 2-d convolution.
//!
//! All loops keep the innermost axis contiguous so the compiler can
//! vectorize; `axpy` on stride-1 slices is the workhorse.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = a.mul_add(v, *o);
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = x.mul_add(y, acc);
    }
    acc
}

/// C(m x n) += A(m x k) * B(k x n), with B walked in column tiles that fit L2.
pub fn gemm_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    const TILE: usize = 2048;
    let mut j0 = 0;
    while j0 < n {
        let jw = TILE.min(n - j0);
        for i in 0..m {
            let c_row = &mut c[i * n + j0..i * n + j0 + jw];
            for p in 0..k {
                let av = a[i * k + p];
                if av != T::zero() {
                    axpy(c_row, av, &b[p * n + j0..p * n + j0 + jw]);
                }
            }
        }
        j0 += jw;
    }
}

/// C(m x n) += A(m x k) * B(n x k)^T  (rows of B are dotted against rows of A).
pub fn gemm_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C(k x n) += A(m x k)^T * B(m x n).
pub fn gemm_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(&mut c[p * n..(p + 1) * n], av, b_row);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad_h - self.kh) / self.stride_h + 1;
        let ow = (w + 2 * self.pad_w - self.kw) / self.stride_w + 1;
        (oh, ow)
    }
}

/// Valid output-column range for one kernel column offset, given padding.
/// Returns (ow_start, ow_end) such that iw = ow*stride - pad + kw_off stays
/// inside [0, w).
#[inline]
fn ow_range(w: usize, ow_total: usize, stride: usize, pad: usize, kw_off: usize) -> (usize, usize) {
    let lo = if kw_off >= pad {
        0
    } else {
        (pad - kw_off + stride - 1) / stride
    };
    // iw < w  =>  ow < (w + pad - kw_off) / stride  (exclusive)
    let hi_num = w + pad;
    let hi = if hi_num > kw_off {
        ((hi_num - kw_off - 1) / stride + 1).min(ow_total)
    } else {
        0
    };
    (lo.min(ow_total), hi)
}

/// Direct convolution over one (B, C_in, H, W) batch element set.
/// Input and output are packed [b][c][h][w].
pub fn conv2d_fwd<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    spec: &Conv2dSpec,
    batch: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (oh, ow) = spec.out_hw(h, w);
    let mut out = vec![T::zero(); batch * spec.c_out * oh * ow];
    for b in 0..batch {
        let in_base = b * spec.c_in * h * w;
        let out_base = b * spec.c_out * oh * ow;
        for co in 0..spec.c_out {
            let o_ch = &mut out[out_base + co * oh * ow..out_base + (co + 1) * oh * ow];
            let bv = bias[co];
            for v in o_ch.iter_mut() {
                *v = bv;
            }
            for ci in 0..spec.c_in {
                let i_ch = &input[in_base + ci * h * w..in_base + (ci + 1) * h * w];
                for kh_off in 0..spec.kh {
                    for kw_off in 0..spec.kw {
                        let wv = weight[((co * spec.c_in + ci) * spec.kh + kh_off) * spec.kw
                            + kw_off];
                        if wv == T::zero() {
                            continue;
                        }
                        let (lo, hi) = ow_range(w, ow, spec.stride_w, spec.pad_w, kw_off);
                        if lo >= hi {
                            continue;
                        }
                        for oh_i in 0..oh {
                            let ih = oh_i * spec.stride_h + kh_off;
                            if ih < spec.pad_h || ih - spec.pad_h >= h {
                                continue;
                            }
                            let ih = ih - spec.pad_h;
                            let o_row = &mut o_ch[oh_i * ow + lo..oh_i * ow + hi];
                            if spec.stride_w == 1 {
                                let iw0 = lo + kw_off - spec.pad_w;
                                axpy(o_row, wv, &i_ch[ih * w + iw0..ih * w + iw0 + (hi - lo)]);
                            } else {
                                for (jj, o) in o_row.iter_mut().enumerate() {
                                    let iw = (lo + jj) * spec.stride_w + kw_off - spec.pad_w;
                                    *o = wv.mul_add(i_ch[ih * w + iw], *o);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d_fwd` w.r.t. input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    spec: &Conv2dSpec,
    batch: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = spec.out_hw(h, w);
    let mut g_in = vec![T::zero(); batch * spec.c_in * h * w];
    let mut g_w = vec![T::zero(); weight.len()];
    let mut g_b = vec![T::zero(); spec.c_out];
    for b in 0..batch {
        let in_base = b * spec.c_in * h * w;
        let out_base = b * spec.c_out * oh * ow;
        for co in 0..spec.c_out {
            let go_ch = &grad_out[out_base + co * oh * ow..out_base + (co + 1) * oh * ow];
            g_b[co] += go_ch.iter().copied().sum();
            for ci in 0..spec.c_in {
                let i_ch = &input[in_base + ci * h * w..in_base + (ci + 1) * h * w];
                let gi_ch = &mut g_in[in_base + ci * h * w..in_base + (ci + 1) * h * w];
                for kh_off in 0..spec.kh {
                    for kw_off in 0..spec.kw {
                        let widx =
                            ((co * spec.c_in + ci) * spec.kh + kh_off) * spec.kw + kw_off;
                        let wv = weight[widx];
                        let (lo, hi) = ow_range(w, ow, spec.stride_w, spec.pad_w, kw_off);
                        if lo >= hi {
                            continue;
                        }
                        let mut gw_acc = T::zero();
                        for oh_i in 0..oh {
                            let ih = oh_i * spec.stride_h + kh_off;
                            if ih < spec.pad_h || ih - spec.pad_h >= h {
                                continue;
                            }
                            let ih = ih - spec.pad_h;
                            let go_row = &go_ch[oh_i * ow + lo..oh_i * ow + hi];
                            if spec.stride_w == 1 {
                                let iw0 = lo + kw_off - spec.pad_w;
                                gw_acc = gw_acc
                                    + dot(go_row, &i_ch[ih * w + iw0..ih * w + iw0 + (hi - lo)]);
                                axpy(
                                    &mut gi_ch[ih * w + iw0..ih * w + iw0 + (hi - lo)],
                                    wv,
                                    go_row,
                                );
                            } else {
                                for (jj, &g) in go_row.iter().enumerate() {
                                    let iw =
                                        (lo + jj) * spec.stride_w + kw_off - spec.pad_w;
                                    gw_acc = g.mul_add(i_ch[ih * w + iw], gw_acc);
                                    gi_ch[ih * w + iw] = wv.mul_add(g, gi_ch[ih * w + iw]);
                                }
                            }
                        }
                        g_w[widx] += gw_acc;
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

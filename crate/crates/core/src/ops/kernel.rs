//! Per-plane convolution kernels shared by the standard and depthwise ops.
//!
//! Loops run kernel tap outermost and output column innermost so that, at
//! stride 1, the inner loop is an `axpy` over contiguous rows.

use crate::error::{shape_err, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

/// `⌊(in + 2·pad − k)/stride⌋ + 1`, rejecting kernels larger than the padded input.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

impl Geometry {
    pub fn new(
        op: &'static str,
        (in_h, in_w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Result<Self> {
        let bad = || {
            shape_err(
                op,
                format!(
                    "kernel {kh}x{kw} stride {sh}x{sw} pad {ph}x{pw} does not fit input {in_h}x{in_w}"
                ),
            )
        };
        let out_h = out_extent(in_h, kh, sh, ph).ok_or_else(bad)?;
        let out_w = out_extent(in_w, kw, sw, pw).ok_or_else(bad)?;
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
        })
    }

    pub(crate) fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Output indices `o` in `[0, out_len)` whose input coordinate
/// `o·stride + tap − pad` lands inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi = if in_len + pad <= tap {
        0
    } else {
        (in_len + pad - tap).div_ceil(stride).min(out_len)
    };
    (lo, hi.max(lo))
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent partial sums (fixed order, so the
/// result is deterministic) to let the compiler vectorize.
#[inline]
pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for k in 0..chunks {
        let xs = &x[k * 8..k * 8 + 8];
        let ys = &y[k * 8..k * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for k in chunks * 8..n {
        tail += x[k] * y[k];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// `y (m×p) += a (m×k) · x (k×p)`, row-major. Four output rows share each pass
/// over a tile of `x`; every output still sums over `k` in index order.
pub(crate) fn gemm_acc<T: Scalar>(y: &mut [T], a: &[T], x: &[T], m: usize, k: usize, p: usize) {
    const TILE: usize = 256;
    for p0 in (0..p).step_by(TILE) {
        let len = TILE.min(p - p0);
        let mut r = 0;
        while r + 4 <= m {
            let (y0, rest) = y[r * p..(r + 4) * p].split_at_mut(p);
            let (y1, rest) = rest.split_at_mut(p);
            let (y2, y3) = rest.split_at_mut(p);
            let y0 = &mut y0[p0..p0 + len];
            let y1 = &mut y1[p0..p0 + len];
            let y2 = &mut y2[p0..p0 + len];
            let y3 = &mut y3[p0..p0 + len];
            for c in 0..k {
                let xr = &x[c * p + p0..c * p + p0 + len];
                let (w0, w1, w2, w3) = (a[r * k + c], a[(r + 1) * k + c], a[(r + 2) * k + c], a[(r + 3) * k + c]);
                for i in 0..len {
                    let v = xr[i];
                    y0[i] += w0 * v;
                    y1[i] += w1 * v;
                    y2[i] += w2 * v;
                    y3[i] += w3 * v;
                }
            }
            r += 4;
        }
        for r in r..m {
            let yr = &mut y[r * p + p0..r * p + p0 + len];
            for c in 0..k {
                axpy(a[r * k + c], &x[c * p + p0..c * p + p0 + len], yr);
            }
        }
    }
}

/// Unfolds one `cin×H×W` image into a `(cin·kh·kw) × (out_h·out_w)` matrix
/// whose rows follow the `(ci, ki, kj)` weight layout; padded taps are zero.
pub(crate) fn im2col<T: Scalar>(col: &mut [T], input: &[T], cin: usize, g: &Geometry) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    col.fill(T::zero());
    for ci in 0..cin {
        let plane = &input[ci * in_plane..][..in_plane];
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.out_h, g.in_h, g.sh, ki, g.ph);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.out_w, g.in_w, g.sw, kj, g.pw);
                let row = &mut col[((ci * g.kh + ki) * g.kw + kj) * out_plane..][..out_plane];
                for oh in oh_lo..oh_hi {
                    let irow = &plane[(oh * g.sh + ki - g.ph) * g.in_w..][..g.in_w];
                    let orow = &mut row[oh * g.out_w..][..g.out_w];
                    for ow in ow_lo..ow_hi {
                        orow[ow] = irow[ow * g.sw + kj - g.pw];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into a `cin×H×W` gradient.
pub(crate) fn col2im<T: Scalar>(grad_input: &mut [T], col: &[T], cin: usize, g: &Geometry) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    for ci in 0..cin {
        let plane = &mut grad_input[ci * in_plane..][..in_plane];
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.out_h, g.in_h, g.sh, ki, g.ph);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.out_w, g.in_w, g.sw, kj, g.pw);
                let row = &col[((ci * g.kh + ki) * g.kw + kj) * out_plane..][..out_plane];
                for oh in oh_lo..oh_hi {
                    let irow = &mut plane[(oh * g.sh + ki - g.ph) * g.in_w..][..g.in_w];
                    let orow = &row[oh * g.out_w..][..g.out_w];
                    for ow in ow_lo..ow_hi {
                        irow[ow * g.sw + kj - g.pw] += orow[ow];
                    }
                }
            }
        }
    }
}

/// `out += conv(input, kernel)` for a single input/output plane pair.
pub(crate) fn plane_forward<T: Scalar>(out: &mut [T], input: &[T], kernel: &[T], g: &Geometry) {
    if g.is_pointwise() {
        axpy(kernel[0], input, out);
        return;
    }
    for ki in 0..g.kh {
        let (oh_lo, oh_hi) = valid_range(g.out_h, g.in_h, g.sh, ki, g.ph);
        for kj in 0..g.kw {
            let (ow_lo, ow_hi) = valid_range(g.out_w, g.in_w, g.sw, kj, g.pw);
            if ow_lo >= ow_hi {
                continue;
            }
            let w = kernel[ki * g.kw + kj];
            let len = ow_hi - ow_lo;
            let iw0 = ow_lo * g.sw + kj - g.pw;
            for oh in oh_lo..oh_hi {
                let ih = oh * g.sh + ki - g.ph;
                let orow = &mut out[oh * g.out_w + ow_lo..oh * g.out_w + ow_hi];
                let irow = &input[ih * g.in_w..(ih + 1) * g.in_w];
                if g.sw == 1 {
                    axpy(w, &irow[iw0..iw0 + len], orow);
                } else {
                    for (k, o) in orow.iter_mut().enumerate() {
                        *o += w * irow[iw0 + k * g.sw];
                    }
                }
            }
        }
    }
}

/// Accumulates the input-plane gradient and the kernel gradient of one
/// plane pair given the output-plane gradient.
pub(crate) fn plane_backward<T: Scalar>(
    grad_input: &mut [T],
    grad_kernel: &mut [T],
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &Geometry,
) {
    if g.is_pointwise() {
        grad_kernel[0] += dot(grad_out, input);
        axpy(kernel[0], grad_out, grad_input);
        return;
    }
    for ki in 0..g.kh {
        let (oh_lo, oh_hi) = valid_range(g.out_h, g.in_h, g.sh, ki, g.ph);
        for kj in 0..g.kw {
            let (ow_lo, ow_hi) = valid_range(g.out_w, g.in_w, g.sw, kj, g.pw);
            if ow_lo >= ow_hi {
                continue;
            }
            let w = kernel[ki * g.kw + kj];
            let len = ow_hi - ow_lo;
            let iw0 = ow_lo * g.sw + kj - g.pw;
            let mut gk = T::zero();
            for oh in oh_lo..oh_hi {
                let ih = oh * g.sh + ki - g.ph;
                let grow = &grad_out[oh * g.out_w + ow_lo..oh * g.out_w + ow_hi];
                let irow = &input[ih * g.in_w..(ih + 1) * g.in_w];
                let girow = &mut grad_input[ih * g.in_w..(ih + 1) * g.in_w];
                if g.sw == 1 {
                    gk += dot(grow, &irow[iw0..iw0 + len]);
                    axpy(w, grow, &mut girow[iw0..iw0 + len]);
                } else {
                    for (k, &go) in grow.iter().enumerate() {
                        gk += go * irow[iw0 + k * g.sw];
                        girow[iw0 + k * g.sw] += w * go;
                    }
                }
            }
            grad_kernel[ki * g.kw + kj] += gk;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_enumeration() {
        for out_len in 1..8 {
            for in_len in 1..10 {
                for stride in 1..4 {
                    for tap in 0..4 {
                        for pad in 0..3 {
                            let expect: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let c = (o * stride + tap) as isize - pad as isize;
                                    c >= 0 && (c as usize) < in_len
                                })
                                .collect();
                            let (lo, hi) = valid_range(out_len, in_len, stride, tap, pad);
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, expect, "{out_len} {in_len} {stride} {tap} {pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, p) = (7, 5, 300);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let x: Vec<f64> = (0..k * p).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut y = vec![1.0; m * p];
        gemm_acc(&mut y, &a, &x, m, k, p);
        for r in 0..m {
            for i in 0..p {
                let mut expect = 1.0;
                for c in 0..k {
                    expect += a[r * k + c] * x[c * p + i];
                }
                assert_eq!(y[r * p + i], expect);
            }
        }
    }

    #[test]
    fn dot_matches_naive() {
        let x: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - naive).abs() < 1e-12);
    }
}

//! Raw compute kernels over flat buffers, shared by forward and backward.

use crate::scalar::{matmul, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        }
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose input column `ow * stride + k - pad` is in bounds.
fn valid_cols(g: &ConvGeom, k: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(k).div_ceil(g.stride).min(g.ow);
    let hi = if g.w + g.pad > k {
        ((g.w + g.pad - k - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one `[C,H,W]` image into `[C*kh*kw, oh*ow]` columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let npix = g.out_pixels();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (slot, &v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *slot = v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds columns back onto a `[C,H,W]` image, accumulating overlaps.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let npix = g.out_pixels();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let src = &cols[row * npix..(row + 1) * npix];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    let s = &src[oh * g.ow + lo..oh * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y[n] = W * im2col(x[n])` for every sample.
pub fn conv2d_forward<T: Scalar>(x: &[T], n: usize, w: &[T], o: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let npix = g.out_pixels();
    let patch = g.patch();
    let mut y = vec![T::zero(); n * o * npix];
    let mut cols = vec![T::zero(); patch * npix];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        matmul(o, patch, npix, w, false, &cols, false, T::zero(), &mut y[s * o * npix..(s + 1) * o * npix]);
    }
    y
}

/// Accumulates input and/or weight gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    o: usize,
    g: &ConvGeom,
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let in_len = g.c * g.h * g.w;
    let npix = g.out_pixels();
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * npix];
    for s in 0..n {
        let gy_s = &gy[s * o * npix..(s + 1) * o * npix];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
            matmul(o, npix, patch, gy_s, false, &cols, true, T::one(), gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            matmul(patch, o, npix, w, true, gy_s, false, T::zero(), &mut cols);
            col2im_add(&cols, g, &mut gx[s * in_len..(s + 1) * in_len]);
        }
    }
}

/// Max pooling over `[N,C,H,W]`; returns values and the flat argmax of
/// every output. Ties resolve to the lowest flat index.
pub fn max_pool2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<usize>) {
    let npix = g.out_pixels();
    let mut y = Vec::with_capacity(n * g.c * npix);
    let mut arg = Vec::with_capacity(n * g.c * npix);
    for s in 0..n {
        for c in 0..g.c {
            let base = (s * g.c + c) * g.h * g.w;
            for oh in 0..g.oh {
                for ow in 0..g.ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ki in 0..g.kh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * g.w + iw as usize;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (y, arg)
}

/// Row-wise softmax of an `[rows, cols]` buffer with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = src.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for any x, c
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1);
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..g.patch() * g.out_pixels())
            .map(|i| ((i * 3) % 5) as f64 - 2.0)
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_add(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn im2col_naive(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = Vec::new();
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    for oh in 0..g.oh {
                        for ow in 0..g.ow {
                            let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            let inside = (0..g.h as isize).contains(&ih) && (0..g.w as isize).contains(&iw);
                            out.push(if inside { x[(c * g.h + ih as usize) * g.w + iw as usize] } else { 0.0 });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_unfold() {
        for &(h, w, k, stride, pad) in &[(5, 4, 3, 1, 1), (6, 6, 3, 2, 1), (4, 7, 1, 1, 0), (3, 3, 3, 1, 2), (8, 5, 3, 2, 0), (2, 2, 3, 1, 1)] {
            let g = ConvGeom::new(2, h, w, k, k, stride, pad);
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.patch() * g.out_pixels()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, im2col_naive(&x, &g), "{h}x{w} k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn max_pool_ties_pick_lowest_index() {
        let g = ConvGeom::new(1, 2, 2, 2, 2, 1, 0);
        let (y, arg) = max_pool2d_forward(&[1.0f64, 1.0, 1.0, 1.0], 1, &g);
        assert_eq!(y, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}

//! Separable linear resampling expressed as dense per-axis matrices.
//!
//! Both interpolation kernels use half-pixel centres (`align_corners =
//! false`) with edge clamping. Because resampling is linear, the backward
//! pass is the same operation with transposed matrices.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::Scalar;

/// `[n_out, n_in]` bilinear interpolation weights.
pub fn linear_resize_matrix<T: Scalar>(n_in: usize, n_out: usize) -> Array2<T> {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = (scale * (i as f64 + 0.5) - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
        let l1 = src - i0 as f64;
        m[(i, i0)] += T::lit(1.0 - l1);
        m[(i, i1)] += T::lit(l1);
    }
    m
}

const CUBIC_A: f64 = -0.75;

fn cubic_near(x: f64) -> f64 {
    ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
}

fn cubic_far(x: f64) -> f64 {
    ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
}

/// `[n_out, n_in]` bicubic (Keys, a = -0.75) interpolation weights.
pub fn cubic_resize_matrix<T: Scalar>(n_in: usize, n_out: usize) -> Array2<T> {
    let mut m = Array2::zeros((n_out, n_in));
    if n_in == n_out {
        for i in 0..n_in {
            m[(i, i)] = T::one();
        }
        return m;
    }
    let scale = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    for i in 0..n_out {
        let src = scale * (i as f64 + 0.5) - 0.5;
        let base = src.floor();
        let t = src - base;
        let weights = [
            cubic_far(t + 1.0),
            cubic_near(t),
            cubic_near(1.0 - t),
            cubic_far(2.0 - t),
        ];
        for (k, wgt) in weights.iter().enumerate() {
            let j = (base as isize - 1 + k as isize).clamp(0, last) as usize;
            m[(i, j)] += T::lit(*wgt);
        }
    }
    m
}

/// Resample every channel of a `[c, h, w]` map: `out_c = ry · x_c · rxᵀ`.
pub fn resample_chw<T: Scalar>(x: ArrayView3<'_, T>, ry: ArrayView2<'_, T>, rx: ArrayView2<'_, T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    assert_eq!(ry.ncols(), h, "row resampler input size");
    assert_eq!(rx.ncols(), w, "column resampler input size");
    let (oh, ow) = (ry.nrows(), rx.nrows());
    let mut out = Array3::zeros((c, oh, ow));
    for (mut dst, src) in out.outer_iter_mut().zip(x.outer_iter()) {
        dst.assign(&ry.dot(&src).dot(&rx.t()));
    }
    out
}

/// Resample a channels-last `[h, w, c]` grid.
pub fn resample_hwc<T: Scalar>(x: ArrayView3<'_, T>, ry: ArrayView2<'_, T>, rx: ArrayView2<'_, T>) -> Array3<T> {
    let (h, w, c) = x.dim();
    let (oh, ow) = (ry.nrows(), rx.nrows());
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h, w * c))
        .expect("hwc flatten");
    let rows = ry
        .dot(&flat)
        .into_shape_with_order((oh, w, c))
        .expect("row pass reshape");
    let mut out = Array3::zeros((oh, ow, c));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows.axis_iter(Axis(0))) {
        dst.assign(&rx.dot(&src));
    }
    out
}

/// A pair of per-axis resampling matrices with forward and adjoint maps.
#[derive(Debug, Clone)]
pub struct Resampler<T> {
    pub rows: Array2<T>,
    pub cols: Array2<T>,
}

impl<T: Scalar> Resampler<T> {
    pub fn bilinear(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            rows: linear_resize_matrix(src.0, dst.0),
            cols: linear_resize_matrix(src.1, dst.1),
        }
    }

    pub fn bicubic(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            rows: cubic_resize_matrix(src.0, dst.0),
            cols: cubic_resize_matrix(src.1, dst.1),
        }
    }

    pub fn forward_chw(&self, x: ArrayView3<'_, T>) -> Array3<T> {
        resample_chw(x, self.rows.view(), self.cols.view())
    }

    pub fn backward_chw(&self, dy: ArrayView3<'_, T>) -> Array3<T> {
        resample_chw(dy, self.rows.t(), self.cols.t())
    }

    pub fn forward_hwc(&self, x: ArrayView3<'_, T>) -> Array3<T> {
        resample_hwc(x, self.rows.view(), self.cols.view())
    }

    pub fn backward_hwc(&self, dy: ArrayView3<'_, T>) -> Array3<T> {
        resample_hwc(dy, self.rows.t(), self.cols.t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn rows_are_partitions_of_unity() {
        for (a, b) in [(4, 8), (37, 16), (16, 37), (5, 5), (7, 3)] {
            let l: Array2<f64> = linear_resize_matrix(a, b);
            let c: Array2<f64> = cubic_resize_matrix(a, b);
            for r in l.rows().into_iter().chain(c.rows()) {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_doubling_matches_half_pixel_rule() {
        let m: Array2<f64> = linear_resize_matrix(2, 4);
        // output centres at input coordinates -0.25 (clamped), 0.25, 0.75, 1.25
        let expect = ndarray::array![[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        assert_eq!(m, expect);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let r = Resampler::<f64>::bicubic((5, 4), (9, 7));
        let x = Array::from_shape_fn((2, 5, 4), |(c, i, j)| ((c * 20 + i * 4 + j) as f64).sin());
        let y = Array::from_shape_fn((2, 9, 7), |(c, i, j)| ((c * 63 + i * 7 + j) as f64).cos());
        let lhs = (&r.forward_chw(x.view()) * &y).sum();
        let rhs = (&x * &r.backward_chw(y.view())).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn hwc_and_chw_agree() {
        let r = Resampler::<f64>::bicubic((3, 4), (6, 5));
        let x = Array::from_shape_fn((3, 4, 2), |(i, j, c)| (i * 8 + j * 2 + c) as f64 * 0.1);
        let a = r.forward_hwc(x.view());
        let b = r.forward_chw(x.view().permuted_axes([2, 0, 1]));
        let b = b.permuted_axes([1, 2, 0]);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

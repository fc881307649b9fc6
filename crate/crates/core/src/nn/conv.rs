use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join, trunc_normal_array, Parameterized};
use crate::Scalar;

/// Stride-1 square convolution with symmetric zero padding, applied to one
/// `[channels, height, width]` map at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub padding: usize,
}

/// Unfolded input columns kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    in_shape: (usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight: Array4::zeros((out_ch, in_ch, kernel, kernel)),
            bias: Array1::zeros(out_ch),
            padding: kernel / 2,
        }
    }

    /// Kaiming-style fan-in initialisation.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self {
            weight: trunc_normal_array((out_ch, in_ch, kernel, kernel), (2.0 / fan_in).sqrt(), rng),
            bias: Array1::zeros(out_ch),
            padding: kernel / 2,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous conv weight")
    }

    fn im2col(&self, x: ArrayView3<'_, T>) -> Array2<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let p = self.padding as isize;
        let mut cols = Array2::zeros((c * k * k, h * w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let mut row = cols.row_mut((ci * k + ky) * k + kx);
                    let row = row.as_slice_mut().expect("standard layout");
                    for y in 0..h {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - p;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            row[y * w + xx] = x[(ci, sy as usize, sx as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<T>, (c, h, w): (usize, usize, usize)) -> Array3<T> {
        let k = self.kernel();
        let p = self.padding as isize;
        let mut x = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((ci * k + ky) * k + kx);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - p;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            x[(ci, sy as usize, sx as usize)] += row[y * w + xx];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: ArrayView3<'_, T>) -> (Array3<T>, ConvCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.weight.dim().1, "conv input channels");
        let cols = self.im2col(x);
        let mut y = self.weight_matrix().dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row += b;
        }
        let y = y
            .into_shape_with_order((self.weight.dim().0, h, w))
            .expect("conv output reshape");
        (
            y,
            ConvCache {
                cols,
                in_shape: (c, h, w),
            },
        )
    }

    pub fn backward(&self, cache: &ConvCache<T>, dy: ArrayView3<'_, T>, grad: &mut Self) -> Array3<T> {
        let (o, h, w) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, h * w))
            .expect("conv grad reshape");
        let dw = dy2.dot(&cache.cols.t());
        let (_, i, k, _) = self.weight.dim();
        grad.weight += &dw.into_shape_with_order((o, i, k, k)).expect("dw reshape");
        grad.bias += &dy2.sum_axis(Axis(1));
        let dcols = self.weight_matrix().t().dot(&dy2);
        self.col2im(&dcols, cache.in_shape)
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn naive_conv(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (o, _, k, _) = conv.weight.dim();
        let p = conv.padding as isize;
        Array3::from_shape_fn((o, h, w), |(oc, y, xx)| {
            let mut acc = conv.bias[oc];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += conv.weight[(oc, ci, ky, kx)] * x[(ci, sy as usize, sx as usize)];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_convolution() {
        let mut conv = Conv2d::<f64>::zeros(2, 3, 3);
        conv.weight = Array::from_shape_fn(conv.weight.raw_dim(), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 / 11.0 - 0.5
        });
        conv.bias = ndarray::array![0.1, -0.2, 0.3];
        let x = Array::from_shape_fn((2, 4, 5), |(c, i, j)| ((c * 20 + i * 5 + j) as f64).sin());
        let (y, _) = conv.forward(x.view());
        let expect = naive_conv(&conv, &x);
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut conv = Conv2d::<f64>::zeros(2, 2, 3);
        conv.weight = Array::from_shape_fn(conv.weight.raw_dim(), |(a, b, c, d)| {
            ((a + 2 * b + 3 * c + 5 * d) as f64 * 0.37).cos()
        });
        let x = Array::from_shape_fn((2, 3, 3), |(c, i, j)| ((c * 9 + i * 3 + j) as f64 * 0.5).sin());
        let dy = Array::from_shape_fn((2, 3, 3), |(c, i, j)| ((c + i + j) as f64 * 0.3).cos());
        let (_, cache) = conv.forward(x.view());
        let mut g = conv.clone();
        g.weight.fill(0.0);
        g.bias.fill(0.0);
        let dx = conv.backward(&cache, dy.view(), &mut g);
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 1, 2), (0, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fp = (&conv.forward(xp.view()).0 * &dy).sum();
            let fm = (&conv.forward(xm.view()).0 * &dy).sum();
            assert!(((fp - fm) / (2.0 * h) - dx[idx]).abs() < 1e-7);
        }
    }
}

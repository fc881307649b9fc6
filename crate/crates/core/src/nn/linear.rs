use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join, trunc_normal_array, Parameterized};
use crate::Scalar;

/// Affine map `y = x Wᵀ + b` with the weight stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: trunc_normal_array((out_dim, in_dim), std, rng),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, grad: &mut Self) -> Array2<T> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

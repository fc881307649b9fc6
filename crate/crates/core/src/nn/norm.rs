use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};

use super::{join, Parameterized};
use crate::Scalar;

/// Layer normalisation over the last axis of a `[tokens, channels]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub weight: Array1<T>,
    pub bias: Array1<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            weight: Array1::ones(dim),
            bias: Array1::zeros(dim),
            eps,
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, LayerNormCache<T>) {
        let c = T::from_usize(x.ncols()).unwrap();
        let eps = T::lit(self.eps);
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / c;
            *r = T::one() / (var + eps).sqrt();
            let s = *r;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = &xhat * &self.weight;
        y += &self.bias;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: ArrayView2<'_, T>,
        grad: &mut Self,
    ) -> Array2<T> {
        grad.weight += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let c = T::from_usize(dy.ncols()).unwrap();
        let dxhat = &dy * &self.weight;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_g = g.sum() / c;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / c;
            for ((o, &gv), &xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = r * (gv - mean_g - xv * mean_gx);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Batch normalisation over `[batch, channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub weight: Array1<T>,
    pub bias: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Array4<T>,
    rstd: Array1<T>,
}

/// Per-channel batch statistics produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
    pub count: usize,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Array1::ones(channels),
            bias: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_train(
        &self,
        x: ArrayView4<'_, T>,
    ) -> (Array4<T>, BatchNormCache<T>, BatchStats<T>) {
        let (b, c, h, w) = x.dim();
        let n = b * h * w;
        let nt = T::from_usize(n).unwrap();
        let eps = T::lit(self.eps);
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let lane = x.index_axis(Axis(1), ch);
            let m = lane.sum() / nt;
            let v = lane.iter().map(|&u| (u - m) * (u - m)).sum::<T>() / nt;
            mean[ch] = m;
            var[ch] = v;
        }
        let rstd = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut xhat = x.to_owned();
        let mut y = Array4::zeros((b, c, h, w));
        for ch in 0..c {
            let (m, r) = (mean[ch], rstd[ch]);
            let (g, be) = (self.weight[ch], self.bias[ch]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            xh.mapv_inplace(|u| (u - m) * r);
            y.index_axis_mut(Axis(1), ch)
                .zip_mut_with(&xh, |o, &v| *o = g * v + be);
        }
        (
            y,
            BatchNormCache { xhat, rstd },
            BatchStats {
                mean,
                var,
                count: n,
            },
        )
    }

    pub fn forward_eval(&self, x: ArrayView4<'_, T>) -> Array4<T> {
        let eps = T::lit(self.eps);
        let mut y = x.to_owned();
        for ch in 0..x.dim().1 {
            let r = T::one() / (self.running_var[ch] + eps).sqrt();
            let (m, g, be) = (self.running_mean[ch], self.weight[ch], self.bias[ch]);
            y.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|u| g * (u - m) * r + be);
        }
        y
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        dy: ArrayView4<'_, T>,
        grad: &mut Self,
    ) -> Array4<T> {
        let (b, c, h, w) = dy.dim();
        let nt = T::from_usize(b * h * w).unwrap();
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh = dyc.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            grad.weight[ch] += sum_dy_xh;
            grad.bias[ch] += sum_dy;
            let g = self.weight[ch];
            let r = cache.rstd[ch];
            let mean_dy = sum_dy / nt;
            let mean_dy_xh = sum_dy_xh / nt;
            ndarray::Zip::from(dx.index_axis_mut(Axis(1), ch))
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &x| *o = g * r * (d - mean_dy - x * mean_dy_xh));
        }
        dx
    }

    /// Exponential running-statistics update (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let unbias = if stats.count > 1 {
            T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
        } else {
            T::one()
        };
        self.running_mean
            .zip_mut_with(&stats.mean, |r, &v| *r = keep * *r + m * v);
        self.running_var
            .zip_mut_with(&stats.var, |r, &v| *r = keep * *r + m * v * unbias);
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "running_mean"), self.running_mean.view().into_dyn());
        f(&join(prefix, "running_var"), self.running_var.view().into_dyn());
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "running_mean"), self.running_mean.view_mut().into_dyn());
        f(&join(prefix, "running_var"), self.running_var.view_mut().into_dyn());
    }
}

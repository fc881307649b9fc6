//! Gaze heatmap decoder and in/out-of-frame classifier.

use ndarray::{stack, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::nn::{
    join, relu, relu_backward, sigmoid, BatchNorm2d, BatchNormCache, BatchStats, Conv2d, ConvCache,
    Linear, Parameterized, Resampler,
};
use crate::Scalar;

/// Bilinear 2× upsample, 3×3 convolution, batch norm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct UpGroup<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Debug, Clone)]
struct GroupCache<T> {
    up: Resampler<T>,
    conv: Vec<ConvCache<T>>,
    bn: BatchNormCache<T>,
    normed: Array4<T>,
}

#[derive(Debug, Clone)]
pub struct HeatmapHeadCache<T> {
    groups: Vec<GroupCache<T>>,
    out: Vec<ConvCache<T>>,
}

/// Maps `[K·H, h, w]` person-specific features to `[8h, 8w]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapHead<T> {
    pub groups: Vec<UpGroup<T>>,
    pub out: Conv2d<T>,
}

fn stack4<T: Scalar>(maps: &[Array3<T>]) -> Array4<T> {
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    stack(Axis(0), &views).expect("equal map shapes")
}

impl<T: Scalar> HeatmapHead<T> {
    pub fn zeros(in_channels: usize, widths: &[usize]) -> Self {
        let mut prev = in_channels;
        let groups = widths
            .iter()
            .map(|&w| {
                let g = UpGroup {
                    conv: Conv2d::zeros(prev, w, 3),
                    bn: BatchNorm2d::new(w),
                };
                prev = w;
                g
            })
            .collect();
        Self {
            groups,
            out: Conv2d::zeros(prev, 1, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_channels: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut prev = in_channels;
        let groups = widths
            .iter()
            .map(|&w| {
                let g = UpGroup {
                    conv: Conv2d::init(prev, w, 3, rng),
                    bn: BatchNorm2d::new(w),
                };
                prev = w;
                g
            })
            .collect();
        Self {
            groups,
            out: Conv2d::init(prev, 1, 1, rng),
        }
    }

    /// Spatial upsampling factor of the whole head.
    pub fn scale(&self) -> usize {
        1 << self.groups.len()
    }

    /// Inference forward using running batch-norm statistics.
    pub fn forward(&self, x: ArrayView3<'_, T>) -> Array2<T> {
        let mut cur = x.to_owned();
        for g in &self.groups {
            let (_, h, w) = cur.dim();
            let up = Resampler::bilinear((h, w), (2 * h, 2 * w)).forward_chw(cur.view());
            let (y, _) = g.conv.forward(up.view());
            let y = g.bn.forward_eval(y.insert_axis(Axis(0)).view());
            cur = relu(y.index_axis(Axis(0), 0));
        }
        self.out.forward(cur.view()).0.index_axis_move(Axis(0), 0)
    }

    /// Training forward over a batch; batch norm uses batch statistics.
    pub fn forward_train(
        &self,
        xs: &[Array3<T>],
    ) -> (Array3<T>, HeatmapHeadCache<T>, Vec<BatchStats<T>>) {
        let mut cur: Vec<Array3<T>> = xs.to_vec();
        let mut caches = Vec::with_capacity(self.groups.len());
        let mut stats = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let (_, h, w) = cur[0].dim();
            let up = Resampler::bilinear((h, w), (2 * h, 2 * w));
            let mut convs = Vec::with_capacity(cur.len());
            let mut outs = Vec::with_capacity(cur.len());
            for x in &cur {
                let (y, c) = g.conv.forward(up.forward_chw(x.view()).view());
                outs.push(y);
                convs.push(c);
            }
            let (normed, bn, st) = g.bn.forward_train(stack4(&outs).view());
            cur = normed.outer_iter().map(|m| relu(m)).collect();
            stats.push(st);
            caches.push(GroupCache {
                up,
                conv: convs,
                bn,
                normed,
            });
        }
        let mut out_caches = Vec::with_capacity(cur.len());
        let logits: Vec<Array3<T>> = cur
            .iter()
            .map(|x| {
                let (y, c) = self.out.forward(x.view());
                out_caches.push(c);
                y
            })
            .collect();
        let logits = stack4(&logits).index_axis_move(Axis(1), 0);
        (
            logits,
            HeatmapHeadCache {
                groups: caches,
                out: out_caches,
            },
            stats,
        )
    }

    /// Returns the per-sample input gradients.
    pub fn backward(&self, cache: &HeatmapHeadCache<T>, d_logits: &Array3<T>, grad: &mut Self) -> Vec<Array3<T>> {
        let mut d: Vec<Array3<T>> = d_logits
            .outer_iter()
            .zip(&cache.out)
            .map(|(dl, c)| self.out.backward(c, dl.insert_axis(Axis(0)), &mut grad.out))
            .collect();
        for (i, g) in self.groups.iter().enumerate().rev() {
            let gc = &cache.groups[i];
            let d4 = relu_backward(gc.normed.view(), stack4(&d).view());
            let d_conv = g.bn.backward(&gc.bn, d4.view(), &mut grad.groups[i].bn);
            d = d_conv
                .outer_iter()
                .zip(&gc.conv)
                .map(|(dy, c)| {
                    let d_up = g.conv.backward(c, dy, &mut grad.groups[i].conv);
                    gc.up.backward_chw(d_up.view())
                })
                .collect();
        }
        d
    }

    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        for (g, s) in self.groups.iter_mut().zip(stats) {
            g.bn.update_running(s);
        }
    }
}

impl<T: Scalar> Parameterized<T> for HeatmapHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        for (i, g) in self.groups.iter().enumerate() {
            g.conv.visit(&join(prefix, &format!("groups.{i}.conv")), f);
            g.bn.visit(&join(prefix, &format!("groups.{i}.bn")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.conv.visit_mut(&join(prefix, &format!("groups.{i}.conv")), f);
            g.bn.visit_mut(&join(prefix, &format!("groups.{i}.bn")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        for (i, g) in self.groups.iter().enumerate() {
            g.bn.visit_buffers(&join(prefix, &format!("groups.{i}.bn")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.bn.visit_buffers_mut(&join(prefix, &format!("groups.{i}.bn")), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct InOutCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

/// `Linear → ReLU → Linear → sigmoid` giving the probability of looking
/// outside the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InOutHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> InOutHead<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::init(dim, hidden, 0.02, rng),
            fc2: Linear::init(hidden, 1, 0.02, rng),
        }
    }

    pub fn logit(&self, x: ArrayView1<'_, T>) -> T {
        let h = relu(self.fc1.forward(x.insert_axis(Axis(0))).view());
        self.fc2.forward(h.view())[(0, 0)]
    }

    pub fn forward(&self, x: ArrayView1<'_, T>) -> T {
        sigmoid(self.logit(x))
    }

    /// Batched forward over `[B, C]`; returns pre-sigmoid logits.
    pub fn forward_train(&self, x: ArrayView2<'_, T>) -> (Array1<T>, InOutCache<T>) {
        let pre = self.fc1.forward(x);
        let act = relu(pre.view());
        let logits = self.fc2.forward(act.view()).index_axis_move(Axis(1), 0);
        (
            logits,
            InOutCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &InOutCache<T>, d_logits: &Array1<T>, grad: &mut Self) -> Array2<T> {
        let d = d_logits.view().insert_axis(Axis(1));
        let d_act = self.fc2.backward(cache.act.view(), d, &mut grad.fc2);
        let d_pre = relu_backward(cache.pre.view(), d_act.view());
        self.fc1.backward(cache.x.view(), d_pre.view(), &mut grad.fc1)
    }
}

impl<T: Scalar> Parameterized<T> for InOutHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

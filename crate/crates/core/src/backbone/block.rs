use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::attention::{AttentionCache, MultiHeadAttention};
use crate::nn::{gelu, gelu_backward, join, LayerNorm, LayerNormCache, Linear, Parameterized};
use crate::Scalar;

/// Pre-norm transformer block with LayerScale on both residual branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ls1: Array1<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub ls2: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    n1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    attn_out: Array2<T>,
    n2: LayerNormCache<T>,
    h: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    mlp_out: Array2<T>,
}

impl<T: Scalar> Block<T> {
    pub fn zeros(dim: usize, heads: usize, hidden: usize, eps: f64) -> Self {
        Self {
            norm1: LayerNorm::new(dim, eps),
            attn: MultiHeadAttention::zeros(dim, heads),
            ls1: Array1::ones(dim),
            norm2: LayerNorm::new(dim, eps),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
            ls2: Array1::ones(dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
        layer_scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(dim, eps),
            attn: MultiHeadAttention {
                qkv: Linear::init(dim, 3 * dim, 0.02, rng),
                proj: Linear::init(dim, dim, 0.02, rng),
                num_heads: heads,
            },
            ls1: Array1::from_elem(dim, T::lit(layer_scale)),
            norm2: LayerNorm::new(dim, eps),
            fc1: Linear::init(dim, hidden, 0.02, rng),
            fc2: Linear::init(hidden, dim, 0.02, rng),
            ls2: Array1::from_elem(dim, T::lit(layer_scale)),
        }
    }

    fn mlp_branch(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let (h, _) = self.norm2.forward(x);
        let act = gelu(self.fc1.forward(h.view()).view());
        self.fc2.forward(act.view()) * &self.ls2
    }

    /// Inference forward. When `export` is set the attention maps are
    /// materialised and returned; otherwise the chunked kernel is used.
    pub fn forward(&self, x: ArrayView2<'_, T>, export: bool) -> (Array2<T>, Option<Array3<T>>) {
        let (n1, _) = self.norm1.forward(x);
        let (a, maps) = if export {
            let (a, maps, _) = self.attn.forward(n1.view());
            (a, Some(maps))
        } else {
            (self.attn.forward_chunked(n1.view()), None)
        };
        let mid = &x + &(a * &self.ls1);
        let out = &mid + &self.mlp_branch(mid.view());
        (out, maps)
    }

    pub fn forward_train(&self, x: ArrayView2<'_, T>) -> (Array2<T>, Array3<T>, BlockCache<T>) {
        let (n1_out, n1) = self.norm1.forward(x);
        let (attn_out, maps, attn) = self.attn.forward(n1_out.view());
        let mid = &x + &(&attn_out * &self.ls1);
        let (h, n2) = self.norm2.forward(mid.view());
        let pre = self.fc1.forward(h.view());
        let act = gelu(pre.view());
        let mlp_out = self.fc2.forward(act.view());
        let out = &mid + &(&mlp_out * &self.ls2);
        let cache = BlockCache {
            n1,
            attn,
            attn_out,
            n2,
            h,
            pre,
            act,
            mlp_out,
        };
        (out, maps, cache)
    }

    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        dy: ArrayView2<'_, T>,
        d_attn: Option<&Array3<T>>,
        grad: &mut Self,
    ) -> Array2<T> {
        grad.ls2 += &(&dy * &cache.mlp_out).sum_axis(Axis(0));
        let d_mlp = &dy * &self.ls2;
        let d_act = self.fc2.backward(cache.act.view(), d_mlp.view(), &mut grad.fc2);
        let d_pre = gelu_backward(cache.pre.view(), d_act.view());
        let d_h = self.fc1.backward(cache.h.view(), d_pre.view(), &mut grad.fc1);
        let d_mid = &dy + &self.norm2.backward(&cache.n2, d_h.view(), &mut grad.norm2);

        grad.ls1 += &(&d_mid * &cache.attn_out).sum_axis(Axis(0));
        let d_a = &d_mid * &self.ls1;
        let d_n1 = self.attn.backward(&cache.attn, d_a.view(), d_attn, &mut grad.attn);
        &d_mid + &self.norm1.backward(&cache.n1, d_n1.view(), &mut grad.norm1)
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        f(&join(prefix, "ls1.gamma"), self.ls1.view().into_dyn());
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
        f(&join(prefix, "ls2.gamma"), self.ls2.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        f(&join(prefix, "ls1.gamma"), self.ls1.view_mut().into_dyn());
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
        f(&join(prefix, "ls2.gamma"), self.ls2.view_mut().into_dyn());
    }
}

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};

use crate::nn::{join, Linear, Parameterized};
use crate::Scalar;

/// How attention weights are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKernel {
    /// Full `[heads, L, L]` maps are formed and can be exported.
    Materialized,
    /// Query rows are processed in chunks; no full map is ever held.
    Chunked,
}

const QUERY_CHUNK: usize = 64;

/// Multi-head self-attention with a fused query/key/value projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub num_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Array2<T>,
    q: Array3<T>,
    k: Array3<T>,
    v: Array3<T>,
    attn: Array3<T>,
    context: Array2<T>,
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn zeros(dim: usize, num_heads: usize) -> Self {
        Self {
            qkv: Linear::zeros(dim, 3 * dim),
            proj: Linear::zeros(dim, dim),
            num_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.num_heads
    }

    pub fn scale(&self) -> T {
        T::one() / T::from_usize(self.head_dim()).unwrap().sqrt()
    }

    /// Project and split into per-head `[heads, L, head_dim]` tensors.
    fn project(&self, x: ArrayView2<'_, T>) -> (Array3<T>, Array3<T>, Array3<T>) {
        let qkv = self.qkv.forward(x);
        let (l, c, h, d) = (x.nrows(), self.dim(), self.num_heads, self.head_dim());
        let split = |part: usize| {
            Array3::from_shape_fn((h, l, d), |(hh, i, j)| qkv[(i, part * c + hh * d + j)])
        };
        (split(0), split(1), split(2))
    }

    fn merge_heads(&self, ctx: &Array3<T>) -> Array2<T> {
        let (h, l, d) = ctx.dim();
        Array2::from_shape_fn((l, h * d), |(i, j)| ctx[(j / d, i, j % d)])
    }

    /// Attention weights `softmax(q kᵀ / √d)` for every head.
    pub fn attention_weights(&self, q: &Array3<T>, k: &Array3<T>) -> Array3<T> {
        let (h, l, _) = q.dim();
        let scale = self.scale();
        let mut attn = Array3::zeros((h, l, l));
        for hh in 0..h {
            let mut logits = q.index_axis(Axis(0), hh).dot(&k.index_axis(Axis(0), hh).t());
            logits.mapv_inplace(|v| v * scale);
            softmax_rows(&mut logits);
            attn.index_axis_mut(Axis(0), hh).assign(&logits);
        }
        attn
    }

    /// Forward pass that materialises and returns the attention maps.
    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, Array3<T>, AttentionCache<T>) {
        let (q, k, v) = self.project(x);
        let attn = self.attention_weights(&q, &k);
        let (h, l, d) = v.dim();
        let mut ctx = Array3::zeros((h, l, d));
        for hh in 0..h {
            ctx.index_axis_mut(Axis(0), hh)
                .assign(&attn.index_axis(Axis(0), hh).dot(&v.index_axis(Axis(0), hh)));
        }
        let context = self.merge_heads(&ctx);
        let out = self.proj.forward(context.view());
        let cache = AttentionCache {
            input: x.to_owned(),
            q,
            k,
            v,
            attn: attn.clone(),
            context,
        };
        (out, attn, cache)
    }

    /// Inference-only forward that never holds a full `L × L` map.
    pub fn forward_chunked(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let (q, k, v) = self.project(x);
        let (h, l, d) = q.dim();
        let scale = self.scale();
        let mut ctx = Array3::zeros((h, l, d));
        for hh in 0..h {
            let (qh, kh, vh) = (
                q.index_axis(Axis(0), hh),
                k.index_axis(Axis(0), hh),
                v.index_axis(Axis(0), hh),
            );
            for start in (0..l).step_by(QUERY_CHUNK) {
                let end = (start + QUERY_CHUNK).min(l);
                let mut logits = qh.slice(s![start..end, ..]).dot(&kh.t());
                logits.mapv_inplace(|v| v * scale);
                softmax_rows(&mut logits);
                ctx.slice_mut(s![hh, start..end, ..]).assign(&logits.dot(&vh));
            }
        }
        self.proj.forward(self.merge_heads(&ctx).view())
    }

    /// Backward pass. `d_attn` carries any gradient that reaches the
    /// exported attention maps directly (in addition to the value path).
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        d_out: ArrayView2<'_, T>,
        d_attn: Option<&Array3<T>>,
        grad: &mut Self,
    ) -> Array2<T> {
        let d_context = self.proj.backward(cache.context.view(), d_out, &mut grad.proj);
        let (h, l, d) = cache.q.dim();
        let c = self.dim();
        let scale = self.scale();
        let mut d_qkv = Array2::zeros((l, 3 * c));
        for hh in 0..h {
            let d_ctx_h = d_context.slice(s![.., hh * d..(hh + 1) * d]);
            let a = cache.attn.index_axis(Axis(0), hh);
            let vh = cache.v.index_axis(Axis(0), hh);
            let mut d_a = d_ctx_h.dot(&vh.t());
            if let Some(extra) = d_attn {
                d_a += &extra.index_axis(Axis(0), hh);
            }
            let d_v = a.t().dot(&d_ctx_h);
            // softmax backward, row by row
            let mut d_s = Array2::zeros((l, l));
            for ((mut ds, ar), dar) in d_s.rows_mut().into_iter().zip(a.rows()).zip(d_a.rows()) {
                let dot = ar.iter().zip(dar.iter()).map(|(&p, &g)| p * g).sum::<T>();
                for ((o, &p), &g) in ds.iter_mut().zip(ar.iter()).zip(dar.iter()) {
                    *o = p * (g - dot) * scale;
                }
            }
            let d_q = d_s.dot(&cache.k.index_axis(Axis(0), hh));
            let d_k = d_s.t().dot(&cache.q.index_axis(Axis(0), hh));
            d_qkv.slice_mut(s![.., hh * d..(hh + 1) * d]).assign(&d_q);
            d_qkv
                .slice_mut(s![.., c + hh * d..c + (hh + 1) * d])
                .assign(&d_k);
            d_qkv
                .slice_mut(s![.., 2 * c + hh * d..2 * c + (hh + 1) * d])
                .assign(&d_v);
        }
        self.qkv.backward(cache.input.view(), d_qkv.view(), &mut grad.qkv)
    }
}

impl<T: Scalar> Parameterized<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

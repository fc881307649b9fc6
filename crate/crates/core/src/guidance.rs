//! Person-specific 2D guidance over the patch grid and the auxiliary head
//! occurrence branch that shares its stem.

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::data::HeadBox;
use crate::grid::PatchGrid;
use crate::nn::{gelu, gelu_backward, join, sigmoid, Linear, Parameterized};
use crate::{Error, Result, Scalar};

/// Patches whose area intersects the head box. The patch holding the box
/// centre is always included so the mask is never empty.
pub fn head_mask(head: &HeadBox, grid: &PatchGrid) -> Array2<bool> {
    let mut mask = Array2::from_shape_fn((grid.h, grid.w), |(r, c)| {
        head.intersection_area(grid.patch_rect(r, c)) > 0.0
    });
    let (cx, cy) = head.center();
    mask[grid.patch_at(cx, cy)] = true;
    mask
}

/// Softmax restricted to `mask`; masked entries are exactly zero.
pub fn masked_softmax<T: Scalar>(logits: ArrayView2<'_, T>, mask: &Array2<bool>) -> Result<Array2<T>> {
    if logits.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} and mask {:?} differ",
            logits.dim(),
            mask.dim()
        )));
    }
    let max = logits
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(None, |a: Option<T>, v| Some(a.map_or(v, |a| a.max(v))))
        .ok_or_else(|| Error::Precondition("guidance mask has no true entry".into()))?;
    let mut g = Array2::zeros(logits.raw_dim());
    let mut sum = T::zero();
    for ((o, &v), &m) in g.iter_mut().zip(logits.iter()).zip(mask.iter()) {
        if m {
            *o = (v - max).exp();
            sum += *o;
        }
    }
    g.mapv_inplace(|v| v / sum);
    Ok(g)
}

/// Guidance distribution `G` and the mask it is supported on.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap<T> {
    pub g: Array2<T>,
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct GuidanceCache<T> {
    tokens: Array2<T>,
    pre: Array2<T>,
    hidden: Array2<T>,
    g: Array2<T>,
    aux: Array2<T>,
}

/// Two-layer MLP over patch tokens: a shared `C → hidden` GELU stem with a
/// guidance-logit head and an auxiliary head-occurrence head.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGuidance<T> {
    pub stem: Linear<T>,
    pub logit: Linear<T>,
    pub aux: Linear<T>,
}

impl<T: Scalar> SpatialGuidance<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            stem: Linear::zeros(dim, hidden),
            logit: Linear::zeros(hidden, 1),
            aux: Linear::zeros(hidden, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            stem: Linear::init(dim, hidden, 0.02, rng),
            logit: Linear::init(hidden, 1, 0.02, rng),
            aux: Linear::init(hidden, 1, 0.02, rng),
        }
    }

    fn stem_forward(&self, tokens: ArrayView2<'_, T>) -> (Array2<T>, Array2<T>) {
        let pre = self.stem.forward(tokens);
        let hidden = gelu(pre.view());
        (pre, hidden)
    }

    fn to_grid(col: Array2<T>, grid: &PatchGrid) -> Array2<T> {
        col.into_shape_with_order((grid.h, grid.w)).expect("one value per patch")
    }

    /// Per-patch guidance logits before masking.
    pub fn logits(&self, patch_tokens: ArrayView2<'_, T>, grid: &PatchGrid) -> Array2<T> {
        let (_, hidden) = self.stem_forward(patch_tokens);
        Self::to_grid(self.logit.forward(hidden.view()), grid)
    }

    pub fn compute_guidance(
        &self,
        patch_tokens: ArrayView2<'_, T>,
        mask: &Array2<bool>,
        grid: &PatchGrid,
    ) -> Result<GuidanceMap<T>> {
        let g = masked_softmax(self.logits(patch_tokens, grid).view(), mask)?;
        Ok(GuidanceMap { g, mask: mask.clone() })
    }

    /// Probability that each patch overlaps some head.
    pub fn aux_head_predict(&self, patch_tokens: ArrayView2<'_, T>, grid: &PatchGrid) -> Array2<T> {
        let (_, hidden) = self.stem_forward(patch_tokens);
        Self::to_grid(self.aux.forward(hidden.view()), grid).mapv(sigmoid)
    }

    pub fn forward_train(
        &self,
        patch_tokens: ArrayView2<'_, T>,
        mask: &Array2<bool>,
        grid: &PatchGrid,
    ) -> Result<(GuidanceMap<T>, Array2<T>, GuidanceCache<T>)> {
        let (pre, hidden) = self.stem_forward(patch_tokens);
        let logits = Self::to_grid(self.logit.forward(hidden.view()), grid);
        let g = masked_softmax(logits.view(), mask)?;
        let aux = Self::to_grid(self.aux.forward(hidden.view()), grid).mapv(sigmoid);
        let cache = GuidanceCache {
            tokens: patch_tokens.to_owned(),
            pre,
            hidden,
            g: g.clone(),
            aux: aux.clone(),
        };
        Ok((GuidanceMap { g, mask: mask.clone() }, aux, cache))
    }

    /// Backward from gradients on `G` and on the auxiliary probabilities.
    /// Returns the gradient on the patch tokens.
    pub fn backward(
        &self,
        cache: &GuidanceCache<T>,
        d_g: ArrayView2<'_, T>,
        d_aux: ArrayView2<'_, T>,
        grad: &mut Self,
    ) -> Array2<T> {
        let n = cache.tokens.nrows();
        let dot = cache.g.iter().zip(d_g.iter()).map(|(&p, &d)| p * d).sum::<T>();
        let d_logit = ndarray::Zip::from(&cache.g)
            .and(&d_g)
            .map_collect(|&p, &d| p * (d - dot))
            .into_shape_with_order((n, 1))
            .unwrap();
        let d_aux_logit = ndarray::Zip::from(&cache.aux)
            .and(&d_aux)
            .map_collect(|&p, &d| d * p * (T::one() - p))
            .into_shape_with_order((n, 1))
            .unwrap();
        let mut d_hidden = self.logit.backward(cache.hidden.view(), d_logit.view(), &mut grad.logit);
        d_hidden += &self.aux.backward(cache.hidden.view(), d_aux_logit.view(), &mut grad.aux);
        let d_pre = gelu_backward(cache.pre.view(), d_hidden.view());
        self.stem.backward(cache.tokens.view(), d_pre.view(), &mut grad.stem)
    }
}

impl<T: Scalar> Parameterized<T> for SpatialGuidance<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.logit.visit(&join(prefix, "logit"), f);
        self.aux.visit(&join(prefix, "aux"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.logit.visit_mut(&join(prefix, "logit"), f);
        self.aux.visit_mut(&join(prefix, "aux"), f);
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hb(a: f64, b: f64, c: f64, d: f64) -> HeadBox {
        HeadBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn head_mask_examples() {
        let g = PatchGrid::new(4, 4, 14);
        assert!(head_mask(&hb(0.0, 0.0, 1.0, 1.0), &g).iter().all(|&m| m));
        let inner = head_mask(&hb(0.3, 0.55, 0.45, 0.7), &g);
        assert_eq!(inner.iter().filter(|&&m| m).count(), 1);
        assert!(inner[(2, 1)]);
        let quad = head_mask(&hb(0.0, 0.0, 0.5, 0.5), &g);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(quad[(r, c)], r < 2 && c < 2, "({r},{c})");
            }
        }
    }

    #[test]
    fn single_patch_mask_gives_one_hot() {
        let logits = Array2::from_shape_vec((2, 2), vec![5.0, -3.0, 0.1, 9.0]).unwrap();
        let mut mask = Array2::from_elem((2, 2), false);
        mask[(1, 0)] = true;
        let g = masked_softmax(logits.view(), &mask).unwrap();
        assert_eq!(g, Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 0.0]).unwrap());
    }

    #[test]
    fn empty_mask_is_a_precondition_error() {
        let logits = Array2::<f64>::zeros((2, 2));
        let mask = Array2::from_elem((2, 2), false);
        assert!(matches!(masked_softmax(logits.view(), &mask), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_aux_layer_predicts_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SpatialGuidance::<f64>::init(8, 4, &mut rng);
        m.aux = Linear::zeros(4, 1);
        let tokens = Array2::from_shape_fn((4, 8), |(i, j)| (i * 8 + j) as f64 * 0.1);
        let aux = m.aux_head_predict(tokens.view(), &PatchGrid::new(2, 2, 14));
        assert!(aux.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn stem_perturbation_moves_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = SpatialGuidance::<f64>::init(8, 4, &mut rng);
        let grid = PatchGrid::new(2, 2, 14);
        let tokens = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 3 + j) % 5) as f64 - 2.0);
        let mask = Array2::from_elem((2, 2), true);
        let g0 = m.compute_guidance(tokens.view(), &mask, &grid).unwrap().g;
        let a0 = m.aux_head_predict(tokens.view(), &grid);
        let mut p = m.clone();
        p.stem.weight.mapv_inplace(|v| v * 3.0 + 0.05);
        assert_ne!(p.compute_guidance(tokens.view(), &mask, &grid).unwrap().g, g0);
        assert_ne!(p.aux_head_predict(tokens.view(), &grid), a0);
    }

    #[test]
    fn aux_gradient_reaches_shared_stem() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = SpatialGuidance::<f64>::init(6, 3, &mut rng);
        let grid = PatchGrid::new(2, 2, 14);
        let tokens = Array2::from_shape_fn((4, 6), |(i, j)| (i as f64 - j as f64) * 0.7);
        let mask = Array2::from_elem((2, 2), true);
        let (_, _, cache) = m.forward_train(tokens.view(), &mask, &grid).unwrap();
        let mut grad = SpatialGuidance::zeros(6, 3);
        let d_aux = Array2::from_elem((2, 2), 1.0);
        m.backward(&cache, Array2::zeros((2, 2)).view(), d_aux.view(), &mut grad);
        assert!(grad.stem.weight.iter().any(|&v| v != 0.0));
        assert!(grad.logit.weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = SpatialGuidance::<f64>::init(5, 3, &mut rng);
        let mut m = m;
        m.stem.weight.mapv_inplace(|v| v * 40.0);
        m.logit.weight.mapv_inplace(|v| v * 40.0);
        m.aux.weight.mapv_inplace(|v| v * 40.0);
        let grid = PatchGrid::new(2, 3, 14);
        let tokens = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.2 - 1.0);
        let mut mask = Array2::from_elem((2, 3), true);
        mask[(0, 2)] = false;
        let wg = Array2::from_shape_fn((2, 3), |(i, j)| (i + 2 * j) as f64 * 0.3 - 0.4);
        let wa = Array2::from_shape_fn((2, 3), |(i, j)| 0.5 - (i * j) as f64 * 0.2);
        let f = |t: &Array2<f64>| {
            let (gm, aux, _) = m.forward_train(t.view(), &mask, &grid).unwrap();
            (&gm.g * &wg).sum() + (&aux * &wa).sum()
        };
        let (_, _, cache) = m.forward_train(tokens.view(), &mask, &grid).unwrap();
        let mut grad = SpatialGuidance::zeros(5, 3);
        let dt = m.backward(&cache, wg.view(), wa.view(), &mut grad);
        let eps = 1e-6;
        for idx in [(0, 0), (2, 3), (5, 4), (4, 1)] {
            let mut p = tokens.clone();
            p[idx] += eps;
            let mut q = tokens.clone();
            q[idx] -= eps;
            let fd = (f(&p) - f(&q)) / (2.0 * eps);
            assert!((fd - dt[idx]).abs() < 1e-7 * (1.0 + fd.abs()), "{idx:?}: {fd} vs {}", dt[idx]);
        }
    }

    proptest! {
        #[test]
        fn guidance_is_a_distribution_on_the_mask(
            logits in proptest::collection::vec(-20.0f64..20.0, 12),
            bits in proptest::collection::vec(any::<bool>(), 12),
            shift in -50.0f64..50.0,
        ) {
            let mut mask = Array2::from_shape_vec((3, 4), bits).unwrap();
            mask[(0, 0)] = true;
            let l = Array2::from_shape_vec((3, 4), logits).unwrap();
            let g = masked_softmax(l.view(), &mask).unwrap();
            prop_assert!((g.sum() - 1.0).abs() < 1e-9);
            for (&v, &m) in g.iter().zip(mask.iter()) {
                prop_assert!(v >= 0.0);
                if !m { prop_assert_eq!(v, 0.0); }
            }
            let shifted = masked_softmax(l.mapv(|v| v + shift).view(), &mask).unwrap();
            for (a, b) in g.iter().zip(shifted.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

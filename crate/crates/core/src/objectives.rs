//! Heatmap regression, focal in/out loss, auxiliary BCE and their weighted sum.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub heatmap: f64,
    pub inout: f64,
    pub aux: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            heatmap: 100.0,
            inout: 1.0,
            aux: 1.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.heatmap, self.inout, self.aux, self.gamma];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// The three loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub heatmap: f64,
    pub inout: f64,
    pub aux: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.heatmap * parts.heatmap + w.inout * parts.inout + w.aux * parts.aux
}

fn same_shape<T>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::Shape(format!("prediction {:?} vs target {:?}", a.dim(), b.dim())))
    }
}

/// Mean squared error over pixels; zero for samples without a gaze target.
pub fn heatmap_loss<T: Scalar>(pred: ArrayView2<'_, T>, gt: ArrayView2<'_, T>, inside: bool) -> Result<T> {
    same_shape(&pred, &gt)?;
    if !inside {
        return Ok(T::zero());
    }
    let n = T::from_usize(pred.len()).unwrap();
    Ok(Zip::from(&pred).and(&gt).fold(T::zero(), |acc, &p, &g| acc + (p - g) * (p - g)) / n)
}

pub fn heatmap_loss_grad<T: Scalar>(pred: ArrayView2<'_, T>, gt: ArrayView2<'_, T>, inside: bool) -> Array2<T> {
    if !inside {
        return Array2::zeros(pred.raw_dim());
    }
    let k = T::lit(2.0) / T::from_usize(pred.len()).unwrap();
    Zip::from(&pred).and(&gt).map_collect(|&p, &g| k * (p - g))
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    p.max(T::lit(EPS)).min(T::lit(1.0 - EPS))
}

/// Focal loss `−(1 − p_t)^γ · ln p_t` with `p_t` the probability assigned
/// to the true class (`p_out` when the person looks outside).
pub fn inout_loss<T: Scalar>(p_out: T, label_out: bool, gamma: f64) -> T {
    let p = clamp_prob(p_out);
    let pt = if label_out { p } else { T::one() - p };
    -(T::one() - pt).powf(T::lit(gamma)) * pt.ln()
}

/// Derivative of [`inout_loss`] with respect to the pre-sigmoid logit.
pub fn inout_loss_grad_logit<T: Scalar>(p_out: T, label_out: bool, gamma: f64) -> T {
    let lo = T::lit(EPS);
    let hi = T::lit(1.0 - EPS);
    if p_out < lo || p_out > hi {
        return T::zero();
    }
    let pt = if label_out { p_out } else { T::one() - p_out };
    let q = T::one() - pt;
    let g = T::lit(gamma);
    let d_pt = if gamma == 0.0 {
        -T::one() / pt
    } else {
        g * q.powf(g - T::one()) * pt.ln() - q.powf(g) / pt
    };
    let d_p = if label_out { d_pt } else { -d_pt };
    d_p * p_out * (T::one() - p_out)
}

/// Mean binary cross-entropy over patches.
pub fn aux_loss<T: Scalar>(pred: ArrayView2<'_, T>, gt: ArrayView2<'_, T>) -> Result<T> {
    same_shape(&pred, &gt)?;
    let n = T::from_usize(pred.len()).unwrap();
    Ok(Zip::from(&pred).and(&gt).fold(T::zero(), |acc, &p, &g| {
        let p = clamp_prob(p);
        acc - (g * p.ln() + (T::one() - g) * (T::one() - p).ln())
    }) / n)
}

/// Derivative of [`aux_loss`] with respect to the predicted probabilities.
pub fn aux_loss_grad<T: Scalar>(pred: ArrayView2<'_, T>, gt: ArrayView2<'_, T>) -> Array2<T> {
    let n = T::from_usize(pred.len()).unwrap();
    let (lo, hi) = (T::lit(EPS), T::lit(1.0 - EPS));
    Zip::from(&pred).and(&gt).map_collect(|&p, &g| {
        if p < lo || p > hi {
            T::zero()
        } else {
            (-g / p + (T::one() - g) / (T::one() - p)) / n
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sigmoid;
    use proptest::prelude::*;

    #[test]
    fn heatmap_examples() {
        let gt = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        assert_eq!(heatmap_loss(gt.view(), gt.view(), true).unwrap(), 0.0);
        let off = &gt + 1.0;
        assert!((heatmap_loss(off.view(), gt.view(), true).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(heatmap_loss(off.view(), gt.view(), false).unwrap(), 0.0);
        assert!(heatmap_loss(off.view(), Array2::zeros((2, 2)).view(), true).is_err());
    }

    #[test]
    fn focal_half_probability() {
        let l: f64 = inout_loss(0.5, true, 2.0);
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_half_is_ln_two() {
        let p = Array2::from_elem((3, 3), 0.5);
        let g = Array2::from_shape_fn((3, 3), |(i, j)| ((i + j) % 3) as f64 / 2.0);
        assert!((aux_loss(p.view(), g.view()).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn combination_uses_weights() {
        let parts = LossParts {
            heatmap: 0.01,
            inout: 1.0,
            aux: 1.0,
        };
        assert!((parts.total(&LossWeights::default()) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn focal_logit_gradient_matches_finite_difference() {
        for &label in &[true, false] {
            for &gamma in &[0.0, 1.0, 2.0] {
                for &z in &[-3.0f64, -0.4, 0.0, 1.7] {
                    let f = |z: f64| inout_loss(sigmoid(z), label, gamma);
                    let fd = (f(z + 1e-6) - f(z - 1e-6)) / 2e-6;
                    let an = inout_loss_grad_logit(sigmoid(z), label, gamma);
                    assert!((fd - an).abs() < 1e-7, "{label} {gamma} {z}: {fd} vs {an}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn focal_never_exceeds_cross_entropy(p in 0.0f64..=1.0, label in any::<bool>()) {
            prop_assert!(inout_loss(p, label, 2.0) <= inout_loss(p, label, 0.0) + 1e-15);
            prop_assert!(inout_loss(p, label, 2.0) >= 0.0);
        }

        #[test]
        fn aux_is_convex_in_prediction(a in 0.01f64..0.99, b in 0.01f64..0.99, t in 0.0f64..1.0, g in any::<bool>()) {
            let g = if g { 1.0 } else { 0.0 };
            let f = |p: f64| aux_loss(Array2::from_elem((1, 1), p).view(), Array2::from_elem((1, 1), g).view()).unwrap();
            prop_assert!(f(t * a + (1.0 - t) * b) <= t * f(a) + (1.0 - t) * f(b) + 1e-12);
        }
    }
}

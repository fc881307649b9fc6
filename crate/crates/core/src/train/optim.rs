//! AdamW with per-tensor learning-rate multipliers (layer-wise decay).

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::nn::Parameterized;
use crate::{Error, Result, Scalar};

/// Optimisation settings of one named tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroup {
    pub lr_mult: f64,
    pub weight_decay: f64,
}

const TOKEN_NAMES: [&str; 4] = ["cls_token", "register_tokens", "mask_token", "pos_embed"];

/// `decay^k` by repeated multiplication.
fn decay_pow(decay: f64, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, _| acc * decay)
}

/// Learning-rate multiplier for a tensor of the assembled model.
///
/// Block `i` (1-indexed) of a `depth`-block backbone gets
/// `decay^(depth − i)`; patch embedding and tokens get `decay^depth`;
/// the backbone's final norm and everything outside the backbone get 1.
pub fn layer_multiplier(name: &str, depth: usize, decay: f64) -> f64 {
    let Some(rest) = name.strip_prefix("backbone.") else {
        return 1.0;
    };
    if let Some(block) = rest.strip_prefix("blocks.") {
        let idx: usize = block
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("block tensors are named blocks.<index>.*");
        return decay_pow(decay, depth - (idx + 1));
    }
    if rest.starts_with("patch_embed.") || TOKEN_NAMES.contains(&rest) {
        return decay_pow(decay, depth);
    }
    1.0
}

/// Decoupled weight decay applies to matrices and kernels only: biases,
/// norm affines, layer scales, tokens and positional tables are exempt.
pub fn decays_weight(name: &str, ndim: usize) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    ndim >= 2 && !TOKEN_NAMES.contains(&leaf)
}

/// Groups for every trainable tensor of a model.
pub fn build_param_groups<T: Scalar>(
    model: &dyn Parameterized<T>,
    depth: usize,
    layerwise_decay: f64,
    weight_decay: f64,
) -> BTreeMap<String, ParamGroup> {
    let mut groups = BTreeMap::new();
    model.visit("", &mut |name, v| {
        let wd = if decays_weight(name, v.ndim()) { weight_decay } else { 0.0 };
        groups.insert(
            name.to_string(),
            ParamGroup {
                lr_mult: layer_multiplier(name, depth, layerwise_decay),
                weight_decay: wd,
            },
        );
    });
    groups
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: ArrayD<T>,
    v: ArrayD<T>,
}

/// AdamW in the update order of the common deep-learning frameworks:
/// decay the weights by `1 − lr·wd`, then take the bias-corrected Adam step.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub groups: BTreeMap<String, ParamGroup>,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, groups: BTreeMap<String, ParamGroup>) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            groups,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with base learning rate `lr`.
    pub fn step(&mut self, params: &mut dyn Parameterized<T>, grads: &dyn Parameterized<T>, lr: f64) -> Result<()> {
        let mut grad_map = BTreeMap::new();
        grads.visit("", &mut |name, g| {
            grad_map.insert(name.to_string(), g.to_owned());
        });
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_m_b1, one_m_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let eps = T::lit(self.eps);
        let mut missing = Vec::new();
        let groups = &self.groups;
        let state = &mut self.state;
        params.visit_mut("", &mut |name, mut p| {
            let (Some(g), Some(group)) = (grad_map.get(name), groups.get(name)) else {
                missing.push(name.to_string());
                return;
            };
            if g.shape() != p.shape() {
                missing.push(format!("{name} (shape)"));
                return;
            }
            let lr_g = lr * group.lr_mult;
            let mom = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: ArrayD::zeros(p.raw_dim()),
                v: ArrayD::zeros(p.raw_dim()),
            });
            if group.weight_decay != 0.0 {
                let keep = T::lit(1.0 - lr_g * group.weight_decay);
                p.mapv_inplace(|x| x * keep);
            }
            let step_size = T::lit(lr_g / bc1);
            let bc2s = T::lit(bc2_sqrt);
            Zip::from(&mut p)
                .and(&mut mom.m)
                .and(&mut mom.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_m_b1 * g;
                    *v = b2 * *v + one_m_b2 * g * g;
                    *p -= step_size * *m / (v.sqrt() / bc2s + eps);
                });
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::State(format!("no gradient or group for: {}", missing.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::join;
    use ndarray::{Array1, ArrayViewMutD};

    #[derive(Clone)]
    struct Pair(Array1<f64>);

    impl Parameterized<f64> for Pair {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)) {
            f(&join(prefix, "w"), self.0.view().into_dyn());
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
            f(&join(prefix, "w"), self.0.view_mut().into_dyn());
        }
    }

    #[test]
    fn multipliers_follow_block_depth() {
        let m = |n: &str| layer_multiplier(n, 12, 0.65);
        assert_eq!(m("backbone.blocks.11.attn.qkv.weight"), 1.0);
        assert_eq!(m("backbone.blocks.10.mlp.fc1.bias"), 0.65);
        assert!((m("backbone.pos_embed") - 0.005_688).abs() < 1e-6);
        assert_eq!(m("backbone.patch_embed.proj.weight"), m("backbone.cls_token"));
        assert_eq!(m("backbone.norm.weight"), 1.0);
        assert_eq!(m("heatmap_head.out.weight"), 1.0);
    }

    #[test]
    fn weight_decay_skips_vectors_and_tokens() {
        assert!(decays_weight("backbone.blocks.0.attn.qkv.weight", 2));
        assert!(decays_weight("backbone.patch_embed.proj.weight", 4));
        assert!(!decays_weight("backbone.blocks.0.attn.qkv.bias", 1));
        assert!(!decays_weight("backbone.cls_token", 3));
        assert!(!decays_weight("backbone.pos_embed", 3));
    }

    #[test]
    fn missing_group_is_reported() {
        let mut p = Pair(Array1::zeros(2));
        let g = p.clone();
        let mut opt = AdamW::new(0.9, 0.99, 1e-8, BTreeMap::new());
        assert!(matches!(opt.step(&mut p, &g, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = Pair(Array1::from(vec![2.0, -4.0]));
        let g = Pair(Array1::zeros(2));
        let groups = build_param_groups(&p, 0, 1.0, 0.5);
        let mut opt = AdamW::new(0.9, 0.99, 1e-8, groups);
        // a 1-D tensor is exempt from decay, so nothing moves at all
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.0.to_vec(), vec![2.0, -4.0]);
    }
}

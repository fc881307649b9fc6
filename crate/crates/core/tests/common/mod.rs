#![allow(dead_code)]

use ndarray::{Array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitgaze::backbone::VitConfig;
use vitgaze::data::HeadBox;
use vitgaze::model::{GazeModel, ModelConfig, TrainExample};
use vitgaze::nn::{params_to_vec, Parameterized};
use vitgaze::objectives::LossWeights;

/// 8×8 images with 2-pixel patches: a 4×4 grid, one block, two heads.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vit: VitConfig {
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            patch_size: 2,
            pos_grid: 4,
            num_registers: 0,
            capture_layers: vec![1],
            layer_scale_init: 1.0,
            ln_eps: 1e-6,
        },
        guidance_hidden: 4,
        heatmap_channels: vec![3, 2],
        inout_hidden: 4,
        renormalize_attention: false,
        head_sigma_scale: 0.25,
    }
}

pub fn toy_model(seed: u64) -> GazeModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GazeModel::init_random(toy_config(), &mut rng).unwrap();
    // larger weights than the default initialiser so every branch carries signal
    m.visit_mut("", &mut |name, mut v| {
        if name.ends_with("weight") && v.ndim() >= 2 {
            v.mapv_inplace(|x| x * 10.0);
        }
        if name.ends_with("token") || name.ends_with("pos_embed") {
            v.mapv_inplace(|_| rng.random::<f64>() - 0.5);
        }
    });
    m
}

pub fn toy_batch(seed: u64) -> Vec<TrainExample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = HeadBox::new(0.1, 0.1, 0.35, 0.4).unwrap();
    let b = HeadBox::new(0.55, 0.5, 0.9, 0.8).unwrap();
    let mut mask = Array2::from_elem((4, 4), false);
    mask[(3, 0)] = true;
    vec![
        TrainExample {
            image: Array::from_shape_simple_fn((3, 8, 8), || rng.random::<f64>() * 2.0 - 1.0),
            mask: Some(mask),
            head: a,
            all_heads: vec![a, b],
            gaze: Some((0.7, 0.2)),
            inside: true,
        },
        TrainExample {
            image: Array::from_shape_simple_fn((3, 8, 8), || rng.random::<f64>() * 2.0 - 1.0),
            mask: None,
            head: b,
            all_heads: vec![b],
            gaze: None,
            inside: false,
        },
    ]
}

pub struct TensorCheck {
    pub name: String,
    pub size: usize,
    pub norm: f64,
    pub rel_err: f64,
}

/// Compares analytic gradients of the weighted total loss with central
/// finite differences for every entry of every trainable tensor. The
/// relative error is `‖fd − an‖ / max(‖fd‖, ‖an‖, 1e-6 · ‖∇‖)` per tensor,
/// with `‖∇‖` the norm of the whole gradient; the floor covers tensors whose exact gradient is identically zero (the
/// guidance logit bias under softmax, conv biases feeding batch norm).
pub fn gradient_check(model: &GazeModel<f64>, batch: &[TrainExample<f64>], weights: &LossWeights) -> Vec<TensorCheck> {
    let mut grad = vitgaze::nn::zeroed_like(model);
    model.loss_and_grad(batch, weights, &mut grad).unwrap();
    let analytic = params_to_vec(&grad);
    let global = analytic.iter().flat_map(|(_, a)| a.iter()).map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-5;
    let mut out = Vec::new();
    for (name, an) in analytic {
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        let mut an2 = 0.0;
        for (k, &a) in an.iter().enumerate() {
            let eval = |delta: f64| {
                let mut p = model.clone();
                p.visit_mut("", &mut |n, mut v| {
                    if n == name {
                        v.as_slice_mut().unwrap()[k] += delta;
                    }
                });
                p.batch_loss(batch, weights).unwrap().total(weights)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            diff2 += (fd - a).powi(2);
            fd2 += fd * fd;
            an2 += a * a;
        }
        let denom = fd2.sqrt().max(an2.sqrt()).max(1e-6 * global);
        out.push(TensorCheck {
            name,
            size: an.len(),
            norm: an2.sqrt(),
            rel_err: diff2.sqrt() / denom,
        });
    }
    out
}

pub mod smoke;

//! Overfit setup: synthetic scenes at 112×112 and a reduced backbone.

use vitgaze::backbone::VitConfig;
use vitgaze::data::synthetic::synthetic_scene;
use vitgaze::data::{sample_rng, AugmentConfig, GazeSample, MemoryImageSource};
use vitgaze::model::ModelConfig;
use vitgaze::train::RunConfig;

pub const RESOLUTION: usize = 112;
pub const SAMPLES: usize = 16;
pub const STEPS: usize = 500;
pub const DOT_RADIUS: f64 = 6.0;

pub fn smoke_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.model = ModelConfig {
        vit: VitConfig {
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 2.0,
            patch_size: 14,
            pos_grid: RESOLUTION / 14,
            num_registers: 0,
            capture_layers: vec![2, 4],
            layer_scale_init: 1.0,
            ln_eps: 1e-6,
        },
        guidance_hidden: 32,
        heatmap_channels: vec![32, 16, 8],
        inout_hidden: 32,
        renormalize_attention: false,
        head_sigma_scale: 0.25,
    };
    cfg.train.base_lr = 1e-3;
    cfg.train.final_lr = 1e-4;
    cfg.train.warmup_ratio = 0.02;
    cfg.train.layerwise_decay = 0.9;
    cfg.train.weight_decay = 0.01;
    cfg.train.batch_size = SAMPLES;
    // one full-batch step per epoch
    cfg.train.epochs = STEPS;
    cfg.train.base_resolution = RESOLUTION;
    cfg.train.final_epoch_resolution = RESOLUTION;
    cfg.augment = AugmentConfig::identity();
    cfg
}

pub fn smoke_data(seed: u64) -> (MemoryImageSource, Vec<GazeSample>) {
    let mut images = MemoryImageSource::new();
    let mut samples = Vec::new();
    for i in 0..SAMPLES {
        let name = format!("scene{i:02}.png");
        let (img, s) = synthetic_scene(RESOLUTION, DOT_RADIUS, &name, &mut sample_rng(seed, i as u64));
        images.insert(name, img);
        samples.push(s);
    }
    (images, samples)
}

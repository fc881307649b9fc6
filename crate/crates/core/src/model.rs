//! The assembled gaze-following network.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::backbone::{BackboneCache, BackboneOutput, LoadReport, VisionTransformer, VitConfig};
use crate::codec::{decode, default_sigma, encode, head_gt_map};
use crate::data::{normalize_imagenet, resize_image, HeadBox, ImageTensor};
use crate::guidance::{head_mask, GuidanceCache, GuidanceMap, SpatialGuidance};
use crate::heads::{HeatmapHead, InOutHead};
use crate::interaction::{
    aggregate_inout, aggregate_inout_backward, aggregate_person, aggregate_person_backward, assemble,
    assemble_backward, InteractionStack,
};
use crate::nn::{join, param_count, sigmoid, BatchStats, Parameterized};
use crate::objectives::{
    aux_loss, aux_loss_grad, heatmap_loss, heatmap_loss_grad, inout_loss, inout_loss_grad_logit, LossParts,
    LossWeights,
};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub guidance_hidden: usize,
    pub heatmap_channels: Vec<usize>,
    pub inout_hidden: usize,
    /// Rescale patch-to-patch attention rows to sum to one after the
    /// class/register columns are dropped.
    pub renormalize_attention: bool,
    /// Auxiliary head blobs use σ = `head_sigma_scale` × box diagonal.
    pub head_sigma_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::vit_small()
    }
}

impl ModelConfig {
    pub fn vit_small() -> Self {
        Self {
            vit: VitConfig::vit_small(),
            guidance_hidden: 192,
            heatmap_channels: vec![64, 32, 16],
            inout_hidden: 192,
            renormalize_attention: false,
            head_sigma_scale: 0.25,
        }
    }

    /// `K · H`, the channel count of the interaction stack.
    pub fn interaction_channels(&self) -> usize {
        self.vit.capture_layers.len() * self.vit.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.guidance_hidden == 0 || self.inout_hidden == 0 || self.heatmap_channels.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.heatmap_channels.is_empty() {
            return Err(Error::Config("heatmap_channels must not be empty".into()));
        }
        if !(self.head_sigma_scale > 0.0) {
            return Err(Error::Config("head_sigma_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Everything produced for one (image, head) query at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle<T> {
    /// Decoded gaze point, normalised.
    pub gaze: (f64, f64),
    pub heatmap: Array2<T>,
    pub p_out: T,
    pub aux: Array2<T>,
    pub guidance: GuidanceMap<T>,
    /// `F_pi`, `[K·H, h, w]`.
    pub person_features: Array3<T>,
}

/// One training instance after augmentation and normalisation.
#[derive(Debug, Clone)]
pub struct TrainExample<T> {
    /// ImageNet-normalised `[3, H, W]`.
    pub image: ImageTensor<T>,
    pub mask: Option<Array2<bool>>,
    pub head: HeadBox,
    /// Every annotated head in the frame (target included).
    pub all_heads: Vec<HeadBox>,
    pub gaze: Option<(f64, f64)>,
    pub inside: bool,
}

/// Loss terms and batch-norm statistics of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub parts: LossParts,
    pub total: f64,
    pub stats: Vec<BatchStats<T>>,
}

struct SampleForward<T> {
    backbone: BackboneOutput<T>,
    cache: BackboneCache<T>,
    stack: InteractionStack<T>,
    guidance: GuidanceMap<T>,
    guidance_cache: GuidanceCache<T>,
    aux: Array2<T>,
    person: Array3<T>,
    inout_feature: Array1<T>,
}

/// Resize to a square input and apply ImageNet normalisation.
pub fn prepare_image<T: Scalar>(image: &ImageTensor<T>, resolution: usize) -> ImageTensor<T> {
    normalize_imagenet(&resize_image(image, resolution, resolution))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeModel<T> {
    pub config: ModelConfig,
    pub backbone: VisionTransformer<T>,
    pub guidance: SpatialGuidance<T>,
    pub heatmap_head: HeatmapHead<T>,
    pub inout_head: InOutHead<T>,
}

impl<T: Scalar> GazeModel<T> {
    /// Zero-initialised model; the backbone must be loaded before use.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.vit.embed_dim;
        Ok(Self {
            backbone: VisionTransformer::zeros(config.vit.clone())?,
            guidance: SpatialGuidance::zeros(c, config.guidance_hidden),
            heatmap_head: HeatmapHead::zeros(config.interaction_channels(), &config.heatmap_channels),
            inout_head: InOutHead::zeros(c, config.inout_hidden),
            config,
        })
    }

    /// Random backbone and decoder.
    pub fn init_random<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = VisionTransformer::init_random(config.vit.clone(), rng)?;
        let mut m = Self::init_decoder(config, rng)?;
        m.backbone = backbone;
        Ok(m)
    }

    /// Random decoder around an unloaded backbone.
    pub fn init_decoder<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let c = m.config.vit.embed_dim;
        m.guidance = SpatialGuidance::init(c, m.config.guidance_hidden, rng);
        m.heatmap_head = HeatmapHead::init(m.config.interaction_channels(), &m.config.heatmap_channels, rng);
        m.inout_head = InOutHead::init(c, m.config.inout_hidden, rng);
        Ok(m)
    }

    /// Loads backbone weights from a DINOv2-layout archive.
    pub fn load_backbone(&mut self, archive: &TensorArchive<T>, prefix: &str) -> Result<LoadReport> {
        let report = self.backbone.load_pretrained(archive, prefix)?;
        self.config.vit = self.backbone.config.clone();
        Ok(report)
    }

    pub fn total_params(&self) -> usize {
        param_count(self)
    }

    /// Parameters outside the backbone.
    pub fn decoder_params(&self) -> usize {
        param_count(&self.guidance) + param_count(&self.heatmap_head) + param_count(&self.inout_head)
    }

    /// Output heatmap side lengths for a given patch grid.
    pub fn heatmap_shape(&self, grid_h: usize, grid_w: usize) -> (usize, usize) {
        let k = self.heatmap_head.scale();
        (grid_h * k, grid_w * k)
    }

    fn features(
        &self,
        out: &BackboneOutput<T>,
        head: &HeadBox,
    ) -> Result<(InteractionStack<T>, GuidanceMap<T>, Array2<T>, Array3<T>, Array1<T>)> {
        let grid = out.grid;
        let mask = head_mask(head, &grid);
        let tokens = out.patch_tokens();
        let guidance = self.guidance.compute_guidance(tokens, &mask, &grid)?;
        let aux = self.guidance.aux_head_predict(tokens, &grid);
        let stack = assemble(&out.attention, &grid, out.prefix_tokens, self.config.renormalize_attention)?;
        let person = aggregate_person(&stack, guidance.g.view());
        let inout = aggregate_inout(tokens, guidance.g.view());
        Ok((stack, guidance, aux, person, inout))
    }

    /// Inference on an already prepared (resized, normalised) image.
    pub fn predict(&self, image: &ImageTensor<T>, head: &HeadBox) -> Result<PredictionBundle<T>> {
        head.validate()?;
        let out = self.backbone.forward(image, None)?;
        let (_, guidance, aux, person, inout) = self.features(&out, head)?;
        let heatmap = self.heatmap_head.forward(person.view());
        let p_out = self.inout_head.forward(inout.view());
        let gaze = decode(heatmap.view())?;
        Ok(PredictionBundle {
            gaze,
            heatmap,
            p_out,
            aux,
            guidance,
            person_features: person,
        })
    }

    fn forward_sample(&self, ex: &TrainExample<T>) -> Result<SampleForward<T>> {
        let (backbone, cache) = self.backbone.forward_train(&ex.image, ex.mask.as_ref())?;
        let grid = backbone.grid;
        let mask = head_mask(&ex.head, &grid);
        let (guidance, aux, guidance_cache) = self.guidance.forward_train(backbone.patch_tokens(), &mask, &grid)?;
        let stack = assemble(
            &backbone.attention,
            &grid,
            backbone.prefix_tokens,
            self.config.renormalize_attention,
        )?;
        let person = aggregate_person(&stack, guidance.g.view());
        let inout_feature = aggregate_inout(backbone.patch_tokens(), guidance.g.view());
        Ok(SampleForward {
            backbone,
            cache,
            stack,
            guidance,
            guidance_cache,
            aux,
            person,
            inout_feature,
        })
    }

    fn check_batch(batch: &[TrainExample<T>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let dim = batch[0].image.dim();
        if batch.iter().any(|e| e.image.dim() != dim) {
            return Err(Error::Shape("all images in a batch must share one size".into()));
        }
        for e in batch {
            if e.inside && e.gaze.is_none() {
                return Err(Error::Validation("inside sample without a gaze point".into()));
            }
        }
        Ok(())
    }

    /// Training-mode batch loss without gradients.
    pub fn batch_loss(&self, batch: &[TrainExample<T>], weights: &LossWeights) -> Result<LossParts> {
        Ok(self.run_batch(batch, weights, None)?.parts)
    }

    /// Training-mode batch loss; gradients of the weighted total are added
    /// into `grad`.
    pub fn loss_and_grad(
        &self,
        batch: &[TrainExample<T>],
        weights: &LossWeights,
        grad: &mut Self,
    ) -> Result<StepOutput<T>> {
        self.run_batch(batch, weights, Some(grad))
    }

    fn run_batch(
        &self,
        batch: &[TrainExample<T>],
        weights: &LossWeights,
        grad: Option<&mut Self>,
    ) -> Result<StepOutput<T>> {
        Self::check_batch(batch)?;
        let b = batch.len();
        let bt = T::from_usize(b).unwrap();
        let samples = batch.iter().map(|e| self.forward_sample(e)).collect::<Result<Vec<_>>>()?;
        let persons: Vec<Array3<T>> = samples.iter().map(|s| s.person.clone()).collect();
        let (logits, head_cache, stats) = self.heatmap_head.forward_train(&persons);
        let io_in = Array2::from_shape_fn((b, self.config.vit.embed_dim), |(i, c)| samples[i].inout_feature[c]);
        let (io_logits, io_cache) = self.inout_head.forward_train(io_in.view());

        let (oh, ow) = (logits.dim().1, logits.dim().2);
        let sigma = default_sigma(oh);
        let mut parts = LossParts::default();
        let mut d_logits = Array3::zeros(logits.raw_dim());
        let mut d_io = Array1::zeros(b);
        let mut d_aux = Vec::with_capacity(b);
        for (i, (ex, s)) in batch.iter().zip(&samples).enumerate() {
            let pred = logits.index_axis(Axis(0), i);
            let gt = match ex.gaze {
                Some(g) if ex.inside => encode::<T>(g, (oh, ow), sigma)?,
                _ => Array2::zeros((oh, ow)),
            };
            parts.heatmap += heatmap_loss(pred, gt.view(), ex.inside)?.as_f64() / b as f64;
            d_logits
                .index_axis_mut(Axis(0), i)
                .assign(&(heatmap_loss_grad(pred, gt.view(), ex.inside) * (T::lit(weights.heatmap) / bt)));

            let p = sigmoid(io_logits[i]);
            parts.inout += inout_loss(p, !ex.inside, weights.gamma).as_f64() / b as f64;
            d_io[i] = inout_loss_grad_logit(p, !ex.inside, weights.gamma) * T::lit(weights.inout) / bt;

            let aux_gt = head_gt_map::<T>(&ex.all_heads, &s.backbone.grid, self.config.head_sigma_scale);
            parts.aux += aux_loss(s.aux.view(), aux_gt.view())?.as_f64() / b as f64;
            d_aux.push(aux_loss_grad(s.aux.view(), aux_gt.view()) * (T::lit(weights.aux) / bt));
        }
        let total = parts.total(weights);

        if let Some(grad) = grad {
            let d_person = self.heatmap_head.backward(&head_cache, &d_logits, &mut grad.heatmap_head);
            let d_io_in = self.inout_head.backward(&io_cache, &d_io, &mut grad.inout_head);
            let heads = self.config.vit.num_heads;
            for (i, s) in samples.iter().enumerate() {
                let g = s.guidance.g.view();
                let tokens = s.backbone.patch_tokens();
                let (d_stack, mut d_g) = aggregate_person_backward(&s.stack, g, &d_person[i]);
                let (mut d_tokens, d_g_io) = aggregate_inout_backward(tokens, g, &d_io_in.row(i).to_owned());
                d_g += &d_g_io;
                d_tokens += &self
                    .guidance
                    .backward(&s.guidance_cache, d_g.view(), d_aux[i].view(), &mut grad.guidance);
                let prefix = s.backbone.prefix_tokens;
                let mut d_final = Array2::zeros(s.backbone.final_tokens.raw_dim());
                d_final.slice_mut(s![prefix.., ..]).assign(&d_tokens);
                let d_attention = assemble_backward(&s.stack, &d_stack, heads, prefix);
                self.backbone
                    .backward(&s.cache, &d_attention, d_final.view(), &mut grad.backbone);
            }
        }
        Ok(StepOutput { parts, total, stats })
    }

    /// Applies batch-norm running-statistics updates from a step.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        self.heatmap_head.update_running(stats);
    }
}

impl<T: Scalar> Parameterized<T> for GazeModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.guidance.visit(&join(prefix, "guidance"), f);
        self.heatmap_head.visit(&join(prefix, "heatmap_head"), f);
        self.inout_head.visit(&join(prefix, "inout_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.guidance.visit_mut(&join(prefix, "guidance"), f);
        self.heatmap_head.visit_mut(&join(prefix, "heatmap_head"), f);
        self.inout_head.visit_mut(&join(prefix, "inout_head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, T>)) {
        self.heatmap_head.visit_buffers(&join(prefix, "heatmap_head"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, T>)) {
        self.heatmap_head.visit_buffers_mut(&join(prefix, "heatmap_head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_small_budget() {
        let m = GazeModel::<f32>::zeros(ModelConfig::vit_small()).unwrap();
        let total = m.total_params() as f64;
        assert!((total - 22e6).abs() < 2.2e6, "{total}");
        assert!((m.decoder_params() as f64) < 0.01 * total);
    }
}

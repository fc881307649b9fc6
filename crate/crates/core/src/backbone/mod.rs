//! DINOv2-style ViT encoder that exports attention maps at chosen blocks.

mod attention;
mod block;

pub use attention::{AttentionCache, AttentionKernel, MultiHeadAttention};
pub use block::{Block, BlockCache};

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::data::ImageTensor;
use crate::grid::PatchGrid;
use crate::nn::{join, trunc_normal_array, LayerNorm, LayerNormCache, Parameterized, Resampler};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    /// Side of the stored positional table (37 for DINOv2 checkpoints).
    pub pos_grid: usize,
    pub num_registers: usize,
    /// 1-indexed blocks whose attention maps are exported.
    pub capture_layers: Vec<usize>,
    pub layer_scale_init: f64,
    pub ln_eps: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::vit_small()
    }
}

impl VitConfig {
    /// ViT-S/14 as shipped with DINOv2.
    pub fn vit_small() -> Self {
        Self {
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            mlp_ratio: 4.0,
            patch_size: 14,
            pos_grid: 37,
            num_registers: 0,
            capture_layers: vec![3, 6, 9, 12],
            layer_scale_init: 1e-5,
            ln_eps: 1e-6,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Tokens preceding the patch tokens: class token plus registers.
    pub fn prefix_tokens(&self) -> usize {
        1 + self.num_registers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || self.pos_grid == 0 || self.depth == 0 {
            return bad("patch_size, pos_grid and depth must be positive".into());
        }
        if self.mlp_ratio <= 0.0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.capture_layers.is_empty() {
            return bad("capture_layers must not be empty".into());
        }
        let mut prev = 0;
        for &l in &self.capture_layers {
            if l <= prev || l > self.depth {
                return bad(format!(
                    "capture_layers must be strictly increasing within 1..={}",
                    self.depth
                ));
            }
            prev = l;
        }
        Ok(())
    }
}

/// Exported attention at the capture blocks plus final normalised tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput<T> {
    /// One `[heads, L, L]` map per capture layer.
    pub attention: Vec<Array3<T>>,
    /// `[L, C]` after the final LayerNorm.
    pub final_tokens: Array2<T>,
    pub grid: PatchGrid,
    pub prefix_tokens: usize,
}

impl<T: Scalar> BackboneOutput<T> {
    pub fn patch_tokens(&self) -> ArrayView2<'_, T> {
        self.final_tokens.slice(s![self.prefix_tokens.., ..])
    }
}

#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    patches: Array2<T>,
    mask: Option<Array2<bool>>,
    resampler: Resampler<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
}

/// Tensors that were present in a checkpoint but not used by the model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub unexpected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionTransformer<T> {
    pub config: VitConfig,
    /// `[C, 3, P, P]`.
    pub patch_weight: Array4<T>,
    pub patch_bias: Array1<T>,
    pub cls_token: Array1<T>,
    /// `[R, C]`.
    pub register_tokens: Array2<T>,
    pub mask_token: Array1<T>,
    /// `[1 + G², C]`, class position first.
    pub pos_embed: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    loaded: bool,
}

impl<T: Scalar> VisionTransformer<T> {
    /// Allocates the topology with zero weights. The model refuses to run
    /// until weights are loaded or randomly initialised.
    pub fn zeros(config: VitConfig) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let p = config.patch_size;
        let g = config.pos_grid;
        Ok(Self {
            patch_weight: Array4::zeros((c, 3, p, p)),
            patch_bias: Array1::zeros(c),
            cls_token: Array1::zeros(c),
            register_tokens: Array2::zeros((config.num_registers, c)),
            mask_token: Array1::zeros(c),
            pos_embed: Array2::zeros((1 + g * g, c)),
            blocks: (0..config.depth)
                .map(|_| Block::zeros(c, config.num_heads, config.mlp_hidden(), config.ln_eps))
                .collect(),
            norm: LayerNorm::new(c, config.ln_eps),
            config,
            loaded: false,
        })
    }

    pub fn init_random<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut m = Self::zeros(config)?;
        let c = m.config.embed_dim;
        let p = m.config.patch_size;
        let fan_in = (3 * p * p) as f64;
        m.patch_weight = trunc_normal_array((c, 3, p, p), 1.0 / fan_in.sqrt(), rng);
        m.cls_token = trunc_normal_array(c, 1e-6, rng);
        m.register_tokens = trunc_normal_array(m.register_tokens.raw_dim(), 1e-6, rng);
        m.pos_embed = trunc_normal_array(m.pos_embed.raw_dim(), 0.02, rng);
        let cfg = &m.config;
        m.blocks = (0..cfg.depth)
            .map(|_| {
                Block::init(c, cfg.num_heads, cfg.mlp_hidden(), cfg.ln_eps, cfg.layer_scale_init, rng)
            })
            .collect();
        m.loaded = true;
        Ok(m)
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    /// Marks externally assigned weights as usable.
    pub fn mark_loaded(&mut self) {
        self.loaded = true;
    }

    pub fn grid_for(&self, image: &ImageTensor<T>) -> Result<PatchGrid> {
        let (ch, h, w) = image.dim();
        if ch != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {ch}")));
        }
        PatchGrid::for_image(h, w, self.config.patch_size)
    }

    fn check_ready(&self) -> Result<()> {
        if self.loaded {
            Ok(())
        } else {
            Err(Error::State("backbone weights are not loaded".into()))
        }
    }

    /// `[h·w, 3·P·P]` pixel rows in `(channel, y, x)` order.
    fn extract_patches(image: &ImageTensor<T>, grid: &PatchGrid) -> Array2<T> {
        let p = grid.patch;
        Array2::from_shape_fn((grid.num_patches(), 3 * p * p), |(i, j)| {
            let (py, px) = (i / grid.w, i % grid.w);
            let (c, r) = (j / (p * p), j % (p * p));
            image[(c, py * p + r / p, px * p + r % p)]
        })
    }

    fn pos_resampler(&self, grid: &PatchGrid) -> Resampler<T> {
        let g = self.config.pos_grid;
        Resampler::bicubic((g, g), (grid.h, grid.w))
    }

    fn embed(
        &self,
        patches: &Array2<T>,
        grid: &PatchGrid,
        mask: Option<&Array2<bool>>,
        resampler: &Resampler<T>,
    ) -> Array2<T> {
        let c = self.config.embed_dim;
        let g = self.config.pos_grid;
        let w = self
            .patch_weight
            .view()
            .into_shape_with_order((c, patches.ncols()))
            .expect("contiguous patch weight");
        let mut emb = patches.dot(&w.t());
        emb += &self.patch_bias;
        if let Some(mask) = mask {
            for (mut row, &m) in emb.rows_mut().into_iter().zip(mask.iter()) {
                if m {
                    row.assign(&self.mask_token);
                }
            }
        }
        let table = self
            .pos_embed
            .slice(s![1.., ..])
            .into_shape_with_order((g, g, c))
            .expect("square positional table");
        let pos = resampler.forward_hwc(table);
        emb += &pos.into_shape_with_order((grid.num_patches(), c)).unwrap();

        let prefix = self.config.prefix_tokens();
        let mut tokens = Array2::zeros((prefix + grid.num_patches(), c));
        tokens.row_mut(0).assign(&(&self.cls_token + &self.pos_embed.row(0)));
        tokens.slice_mut(s![1..prefix, ..]).assign(&self.register_tokens);
        tokens.slice_mut(s![prefix.., ..]).assign(&emb);
        tokens
    }

    fn check_mask(mask: Option<&Array2<bool>>, grid: &PatchGrid) -> Result<()> {
        match mask {
            Some(m) if m.dim() != (grid.h, grid.w) => Err(Error::Shape(format!(
                "mask {:?} does not match patch grid {}x{}",
                m.dim(),
                grid.h,
                grid.w
            ))),
            _ => Ok(()),
        }
    }

    /// Token sequence `[cls, registers…, patches…]` with positions added.
    pub fn patchify(&self, image: &ImageTensor<T>, mask: Option<&Array2<bool>>) -> Result<Array2<T>> {
        let grid = self.grid_for(image)?;
        Self::check_mask(mask, &grid)?;
        let patches = Self::extract_patches(image, &grid);
        Ok(self.embed(&patches, &grid, mask, &self.pos_resampler(&grid)))
    }

    fn is_captured(&self, block: usize) -> bool {
        self.config.capture_layers.contains(&(block + 1))
    }

    /// Runs every block over an already embedded sequence.
    pub fn encode_tokens(&self, tokens: Array2<T>) -> (Vec<Array3<T>>, Array2<T>) {
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.config.capture_layers.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, maps) = block.forward(x.view(), self.is_captured(i));
            attention.extend(maps);
            x = y;
        }
        (attention, self.norm.forward(x.view()).0)
    }

    pub fn forward(&self, image: &ImageTensor<T>, mask: Option<&Array2<bool>>) -> Result<BackboneOutput<T>> {
        self.check_ready()?;
        let grid = self.grid_for(image)?;
        let tokens = self.patchify(image, mask)?;
        let (attention, final_tokens) = self.encode_tokens(tokens);
        Ok(BackboneOutput {
            attention,
            final_tokens,
            grid,
            prefix_tokens: self.config.prefix_tokens(),
        })
    }

    /// Forward pass that keeps every intermediate needed by [`backward`].
    ///
    /// [`backward`]: Self::backward
    pub fn forward_train(
        &self,
        image: &ImageTensor<T>,
        mask: Option<&Array2<bool>>,
    ) -> Result<(BackboneOutput<T>, BackboneCache<T>)> {
        self.check_ready()?;
        let grid = self.grid_for(image)?;
        Self::check_mask(mask, &grid)?;
        let patches = Self::extract_patches(image, &grid);
        let resampler = self.pos_resampler(&grid);
        let mut x = self.embed(&patches, &grid, mask, &resampler);
        let mut attention = Vec::new();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, maps, cache) = block.forward_train(x.view());
            if self.is_captured(i) {
                attention.push(maps);
            }
            caches.push(cache);
            x = y;
        }
        let (final_tokens, norm) = self.norm.forward(x.view());
        let out = BackboneOutput {
            attention,
            final_tokens,
            grid,
            prefix_tokens: self.config.prefix_tokens(),
        };
        let cache = BackboneCache {
            patches,
            mask: mask.cloned(),
            resampler,
            blocks: caches,
            norm,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients given gradients on the exported
    /// attention maps (one per capture layer, or none) and on the final
    /// normalised tokens.
    pub fn backward(
        &self,
        cache: &BackboneCache<T>,
        d_attention: &[Array3<T>],
        d_final: ArrayView2<'_, T>,
        grad: &mut Self,
    ) {
        let mut d = self.norm.backward(&cache.norm, d_final, &mut grad.norm);
        let mut captured = self.config.capture_layers.len();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let d_attn = if self.is_captured(i) {
                captured -= 1;
                d_attention.get(captured)
            } else {
                None
            };
            d = block.backward(&cache.blocks[i], d.view(), d_attn, &mut grad.blocks[i]);
        }

        let c = self.config.embed_dim;
        let g = self.config.pos_grid;
        let prefix = self.config.prefix_tokens();
        let d0 = d.row(0);
        grad.cls_token += &d0;
        let mut pos0 = grad.pos_embed.row_mut(0);
        pos0 += &d0;
        grad.register_tokens += &d.slice(s![1..prefix, ..]);

        let mut d_emb = d.slice(s![prefix.., ..]).to_owned();
        let n = d_emb.nrows();
        let (gh, gw) = (cache.resampler.rows.nrows(), cache.resampler.cols.nrows());
        let d_pos = cache
            .resampler
            .backward_hwc(d_emb.view().into_shape_with_order((gh, gw, c)).unwrap());
        let mut table = grad.pos_embed.slice_mut(s![1.., ..]);
        table += &d_pos.into_shape_with_order((g * g, c)).unwrap();

        if let Some(mask) = &cache.mask {
            for (mut row, &m) in d_emb.rows_mut().into_iter().zip(mask.iter()) {
                if m {
                    grad.mask_token += &row;
                    row.fill(T::zero());
                }
            }
        }
        debug_assert_eq!(n, cache.patches.nrows());
        let dw = d_emb.t().dot(&cache.patches);
        let mut gw4 = grad
            .patch_weight
            .view_mut()
            .into_shape_with_order((c, cache.patches.ncols()))
            .unwrap();
        gw4 += &dw;
        grad.patch_bias += &d_emb.sum_axis(Axis(0));
    }

    /// Assigns weights from a checkpoint. A positional table stored at a
    /// different grid is adopted as-is and resampled at run time.
    pub fn load_pretrained(&mut self, archive: &TensorArchive<T>, prefix: &str) -> Result<LoadReport> {
        let c = self.config.embed_dim;
        if let Some(cls) = archive.get(&join(prefix, "cls_token")) {
            if cls.shape().last() != Some(&c) {
                return Err(Error::Load {
                    offending: vec![format!(
                        "{} (archive {:?}, model [1, 1, {c}])",
                        join(prefix, "cls_token"),
                        cls.shape()
                    )],
                });
            }
        }
        if let Some(pos) = archive.get(&join(prefix, "pos_embed")) {
            let sh = pos.shape();
            if sh.len() == 3 && sh[2] == c && sh[1] > 1 {
                let g = ((sh[1] - 1) as f64).sqrt().round() as usize;
                if g * g + 1 == sh[1] {
                    self.config.pos_grid = g;
                    self.pos_embed = Array2::zeros((sh[1], c));
                }
            }
        }
        let reg_name = join(prefix, "register_tokens");
        match archive.get(&reg_name) {
            Some(r) if r.ndim() == 3 && r.shape()[2] == c => {
                self.config.num_registers = r.shape()[1];
                self.register_tokens = Array2::zeros((r.shape()[1], c));
            }
            None => {
                self.config.num_registers = 0;
                self.register_tokens = Array2::zeros((0, c));
            }
            _ => {}
        }

        let mut expected = std::collections::BTreeSet::new();
        self.visit(prefix, &mut |name, _| {
            expected.insert(name.to_string());
        });
        archive.restore(prefix, self)?;
        let unexpected = archive
            .tensors
            .keys()
            .filter(|k| (prefix.is_empty() || k.starts_with(prefix)) && !expected.contains(*k))
            .cloned()
            .collect();
        self.loaded = true;
        Ok(LoadReport { unexpected })
    }
}

impl<T: Scalar> Parameterized<T> for VisionTransformer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        let c = self.config.embed_dim;
        f(&join(prefix, "patch_embed.proj.weight"), self.patch_weight.view().into_dyn());
        f(&join(prefix, "patch_embed.proj.bias"), self.patch_bias.view().into_dyn());
        f(
            &join(prefix, "cls_token"),
            self.cls_token.view().into_shape_with_order((1, 1, c)).unwrap().into_dyn(),
        );
        if self.config.num_registers > 0 {
            let r = self.config.num_registers;
            f(
                &join(prefix, "register_tokens"),
                self.register_tokens.view().into_shape_with_order((1, r, c)).unwrap().into_dyn(),
            );
        }
        f(
            &join(prefix, "mask_token"),
            self.mask_token.view().into_shape_with_order((1, c)).unwrap().into_dyn(),
        );
        let n = self.pos_embed.nrows();
        f(
            &join(prefix, "pos_embed"),
            self.pos_embed.view().into_shape_with_order((1, n, c)).unwrap().into_dyn(),
        );
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        let c = self.config.embed_dim;
        f(&join(prefix, "patch_embed.proj.weight"), self.patch_weight.view_mut().into_dyn());
        f(&join(prefix, "patch_embed.proj.bias"), self.patch_bias.view_mut().into_dyn());
        f(
            &join(prefix, "cls_token"),
            self.cls_token.view_mut().into_shape_with_order((1, 1, c)).unwrap().into_dyn(),
        );
        if self.config.num_registers > 0 {
            let r = self.config.num_registers;
            f(
                &join(prefix, "register_tokens"),
                self.register_tokens
                    .view_mut()
                    .into_shape_with_order((1, r, c))
                    .unwrap()
                    .into_dyn(),
            );
        }
        f(
            &join(prefix, "mask_token"),
            self.mask_token.view_mut().into_shape_with_order((1, c)).unwrap().into_dyn(),
        );
        let n = self.pos_embed.nrows();
        f(
            &join(prefix, "pos_embed"),
            self.pos_embed.view_mut().into_shape_with_order((1, n, c)).unwrap().into_dyn(),
        );
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Largest absolute difference between two equally shaped arrays.
pub fn max_abs_diff<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> T {
    Zip::from(a)
        .and(b)
        .fold(T::zero(), |m, &x, &y| m.max((x - y).abs()))
}

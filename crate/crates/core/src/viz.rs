//! Overlay renderings of one prediction: the guidance map, mid- and
//! last-layer person-specific interaction means, and the gaze heatmap.
//!
//! Maps are min-max scaled, coloured with a fixed jet ramp and blended over
//! the input at alpha 0.5. Pixels whose map value is exactly zero keep the
//! input colour, so the guidance overlay only tints the head region.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};

use crate::data::{image_to_rgb, resize_image, ImageTensor};
use crate::model::{ModelConfig, PredictionBundle};
use crate::{Error, Result, Scalar};

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Piecewise-linear jet colormap on `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// `(v − min) / (max − min)`, or all zeros for a constant map. Zero inputs
/// of a non-negative map stay zero.
fn scale_unit<T: Scalar>(map: &Array2<T>) -> Array2<f64> {
    let lo = map.iter().fold(f64::INFINITY, |a, v| a.min(v.as_f64()));
    let hi = map.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
    if !(hi > lo) {
        return Array2::zeros(map.raw_dim());
    }
    let lo = if lo >= 0.0 { 0.0 } else { lo };
    map.mapv(|v| (v.as_f64() - lo) / (hi - lo))
}

fn upsample_nearest(map: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (mh, mw) = map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| map[(y * mh / h, x * mw / w)])
}

fn upsample_bilinear(map: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let planar = map.clone().insert_axis(Axis(0));
    resize_image(&planar, h, w).index_axis_move(Axis(0), 0)
}

/// Blend a `[0, 1]` map over an image; zero-valued pixels are left as is.
pub fn blend<T: Scalar>(image: &ImageTensor<T>, map: &Array2<f64>) -> ImageTensor<f64> {
    let (_, h, w) = image.dim();
    assert_eq!(map.dim(), (h, w), "map must match the image size");
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let base = image[(c, y, x)].as_f64();
        let v = map[(y, x)];
        if v == 0.0 {
            base
        } else {
            (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * jet(v)[c]
        }
    })
}

/// Mean over the heads of capture group `k` of `F_pi`.
pub fn group_mean<T: Scalar>(person: &Array3<T>, heads: usize, k: usize) -> Array2<f64> {
    let (_, h, w) = person.dim();
    let mut acc = Array2::zeros((h, w));
    for ch in k * heads..(k + 1) * heads {
        acc.zip_mut_with(&person.index_axis(Axis(0), ch), |a, v| *a += v.as_f64());
    }
    acc / heads as f64
}

/// Capture-group indices shown: the middle group (layer 6 of 12 under the
/// default capture list) and the last.
pub fn shown_groups(config: &ModelConfig) -> [usize; 2] {
    let k = config.vit.capture_layers.len();
    [(k - 1) / 2, k - 1]
}

/// The four overlays as `(file name, image)` pairs, in a fixed order.
///
/// `image` is the un-normalised `[0, 1]` input at model resolution.
pub fn overlays<T: Scalar>(
    image: &ImageTensor<T>,
    bundle: &PredictionBundle<T>,
    config: &ModelConfig,
) -> Vec<(String, ImageTensor<f64>)> {
    let (_, h, w) = image.dim();
    let heads = config.vit.num_heads;
    let mut out = Vec::with_capacity(4);
    let g = upsample_nearest(&scale_unit(&bundle.guidance.g), h, w);
    out.push(("guidance.png".to_string(), blend(image, &g)));
    for k in shown_groups(config) {
        let layer = config.vit.capture_layers[k];
        let mean = scale_unit(&group_mean(&bundle.person_features, heads, k));
        let map = upsample_bilinear(&mean, h, w);
        out.push((format!("interaction_layer{layer}.png"), blend(image, &map)));
    }
    let heat = upsample_bilinear(&scale_unit(&bundle.heatmap), h, w);
    out.push(("heatmap.png".to_string(), blend(image, &heat)));
    out
}

/// A heatmap on its own, coloured with the same ramp.
pub fn heatmap_image<T: Scalar>(heatmap: &Array2<T>) -> ImageTensor<f64> {
    let v = scale_unit(heatmap);
    let (h, w) = v.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| jet(v[(y, x)])[c])
}

pub fn save_png(path: &Path, img: &ImageTensor<f64>) -> Result<()> {
    image_to_rgb(img).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write the overlays as PNG files named `<stem>_<overlay>.png` under `dir`.
pub fn write_overlays<T: Scalar>(
    dir: &Path,
    stem: &str,
    image: &ImageTensor<T>,
    bundle: &PredictionBundle<T>,
    config: &ModelConfig,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (name, img) in overlays(image, bundle, config) {
        let path = dir.join(format!("{stem}_{name}"));
        save_png(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
    }

    #[test]
    fn zero_pixels_keep_the_input() {
        let img = Array3::from_elem((3, 2, 2), 0.3f64);
        let map = ndarray::array![[0.0, 1.0], [0.0, 0.5]];
        let out = blend(&img, &map);
        assert_eq!(out[(0, 0, 0)], 0.3);
        assert_eq!(out[(2, 1, 0)], 0.3);
        assert!((out[(0, 0, 1)] - (0.15 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn group_mean_averages_heads_of_one_layer() {
        let p = Array3::from_shape_fn((4, 1, 1), |(c, _, _)| c as f64);
        assert_eq!(group_mean(&p, 2, 0)[(0, 0)], 0.5);
        assert_eq!(group_mean(&p, 2, 1)[(0, 0)], 2.5);
    }

    #[test]
    fn default_capture_list_shows_layers_6_and_12() {
        let cfg = ModelConfig::vit_small();
        let [a, b] = shown_groups(&cfg);
        assert_eq!(cfg.vit.capture_layers[a], 6);
        assert_eq!(cfg.vit.capture_layers[b], 12);
    }
}

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::nn::Resampler;
use crate::{Error, Result, Scalar};

/// Planar RGB image `[3, height, width]` with values in `[0, 1]`.
pub type ImageTensor<T> = Array3<T>;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub fn image_from_rgb(img: &image::RgbImage) -> ImageTensor<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn image_to_rgb<T: Scalar>(t: &ImageTensor<T>) -> image::RgbImage {
    let (_, h, w) = t.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (t[(c, y as usize, x as usize)].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(image_from_rgb(&img.to_rgb8()))
}

/// `(width, height)` read from the file header.
pub fn image_dims(path: impl AsRef<Path>) -> Result<(u32, u32)> {
    let path = path.as_ref();
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear resize to `height × width`.
pub fn resize_image<T: Scalar>(img: &ImageTensor<T>, height: usize, width: usize) -> ImageTensor<T> {
    let (_, h, w) = img.dim();
    if (h, w) == (height, width) {
        return img.clone();
    }
    Resampler::bilinear((h, w), (height, width)).forward_chw(img.view())
}

/// Per-channel standardisation with ImageNet statistics.
pub fn normalize_imagenet<T: Scalar>(img: &ImageTensor<T>) -> ImageTensor<T> {
    let mut out = img.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (T::lit(IMAGENET_MEAN[c]), T::lit(IMAGENET_STD[c]));
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Resolves manifest image references to pixel data.
pub trait ImageSource {
    fn load(&self, image_ref: &str) -> Result<ImageTensor<f32>>;
}

/// Images on disk, relative to a root directory.
#[derive(Debug, Clone)]
pub struct FsImageSource {
    root: PathBuf,
}

impl FsImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageSource for FsImageSource {
    fn load(&self, image_ref: &str) -> Result<ImageTensor<f32>> {
        load_image(self.root.join(image_ref))
    }
}

/// In-memory images keyed by reference.
#[derive(Debug, Clone, Default)]
pub struct MemoryImageSource {
    images: HashMap<String, ImageTensor<f32>>,
}

impl MemoryImageSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, img: ImageTensor<f32>) {
        self.images.insert(image_ref.into(), img);
    }
}

impl ImageSource for MemoryImageSource {
    fn load(&self, image_ref: &str) -> Result<ImageTensor<f32>> {
        self.images
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no in-memory image named {image_ref:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact_on_byte_values() {
        let img = image::RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 70, 255]));
        let t = image_from_rgb(&img);
        assert_eq!(t.dim(), (3, 3, 5));
        assert_eq!(image_to_rgb(&t), img);
    }

    #[test]
    fn normalisation_uses_channel_statistics() {
        let img = Array3::from_elem((3, 1, 1), 0.485f64);
        let n = normalize_imagenet(&img);
        assert!(n[(0, 0, 0)].abs() < 1e-12);
        assert!((n[(1, 0, 0)] - (0.485 - 0.456) / 0.224).abs() < 1e-12);
    }
}

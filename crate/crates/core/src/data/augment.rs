use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GazeSample, HeadBox, ImageTensor};
use crate::{Error, Result, Scalar};

/// Magnitudes of the training-time augmentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Each box side moves by up to this fraction of the box extent.
    pub bbox_jitter_frac: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Side-length fraction range of the random crop.
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    pub mask_token_prob: f64,
    pub background_overlap_threshold: f64,
    pub max_crop_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            bbox_jitter_frac: 0.1,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            crop_scale: [0.5, 1.0],
            flip_prob: 0.5,
            rotation_deg: 15.0,
            mask_token_prob: 0.5,
            background_overlap_threshold: 0.5,
            max_crop_attempts: 10,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which `augment` is the identity.
    pub fn identity() -> Self {
        Self {
            bbox_jitter_frac: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            crop_scale: [1.0, 1.0],
            flip_prob: 0.0,
            rotation_deg: 0.0,
            mask_token_prob: 0.0,
            background_overlap_threshold: 0.5,
            max_crop_attempts: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("mask_token_prob", self.mask_token_prob),
            ("background_overlap_threshold", self.background_overlap_threshold),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let mags = [
            ("bbox_jitter_frac", self.bbox_jitter_frac),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("rotation_deg", self.rotation_deg),
        ];
        for (name, m) in mags {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("{name} = {m} must be a finite non-negative magnitude")));
            }
        }
        for (name, m) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if m >= 1.0 {
                return Err(Error::Config(format!("{name} = {m} would allow a non-positive factor")));
            }
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
            )));
        }
        Ok(())
    }
}

/// Independent random stream for one sample: `(seed, index)` fixes the draw.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    rng.random_range(-half_width..=half_width)
}

fn luma<T: Scalar>(img: &ImageTensor<T>, y: usize, x: usize) -> T {
    T::lit(0.299) * img[(0, y, x)] + T::lit(0.587) * img[(1, y, x)] + T::lit(0.114) * img[(2, y, x)]
}

fn clamp_unit<T: Scalar>(img: &mut ImageTensor<T>) {
    img.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
}

fn jitter_box<R: Rng + ?Sized>(head: HeadBox, frac: f64, rng: &mut R) -> HeadBox {
    let (w, h) = (head.width(), head.height());
    let moved = [
        (head.x_min + uniform(rng, frac) * w).clamp(0.0, 1.0),
        (head.y_min + uniform(rng, frac) * h).clamp(0.0, 1.0),
        (head.x_max + uniform(rng, frac) * w).clamp(0.0, 1.0),
        (head.y_max + uniform(rng, frac) * h).clamp(0.0, 1.0),
    ];
    HeadBox::from_array(moved).unwrap_or(head)
}

fn color_jitter<T: Scalar, R: Rng + ?Sized>(img: &mut ImageTensor<T>, cfg: &AugmentConfig, rng: &mut R) {
    let (_, h, w) = img.dim();
    if cfg.brightness > 0.0 {
        let b = T::lit(1.0 + uniform(rng, cfg.brightness));
        img.mapv_inplace(|v| v * b);
        clamp_unit(img);
    }
    if cfg.contrast > 0.0 {
        let c = T::lit(1.0 + uniform(rng, cfg.contrast));
        let mut mean = T::zero();
        for y in 0..h {
            for x in 0..w {
                mean += luma(img, y, x);
            }
        }
        mean /= T::from_usize(h * w).unwrap();
        img.mapv_inplace(|v| (v - mean) * c + mean);
        clamp_unit(img);
    }
    if cfg.saturation > 0.0 {
        let s = T::lit(1.0 + uniform(rng, cfg.saturation));
        for y in 0..h {
            for x in 0..w {
                let g = luma(img, y, x);
                for c in 0..3 {
                    img[(c, y, x)] = g + (img[(c, y, x)] - g) * s;
                }
            }
        }
        clamp_unit(img);
    }
}

fn keep_points_in_frame(sample: &mut GazeSample, f: impl Fn(f64, f64) -> (f64, f64)) {
    let moved: Vec<(f64, f64)> = sample
        .gaze_points
        .iter()
        .map(|&(x, y)| f(x, y))
        .filter(|(x, y)| (0.0..=1.0).contains(x) && (0.0..=1.0).contains(y))
        .collect();
    if sample.inside && moved.is_empty() {
        sample.inside = false;
    }
    sample.gaze_points = moved;
}

/// Bounding box of the mapped corners of `b`, clipped to the frame.
/// `None` when nothing of the box remains visible.
fn map_box(b: &HeadBox, f: impl Fn(f64, f64) -> (f64, f64)) -> Option<HeadBox> {
    let corners = [
        f(b.x_min, b.y_min),
        f(b.x_max, b.y_min),
        f(b.x_min, b.y_max),
        f(b.x_max, b.y_max),
    ];
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    HeadBox::new(x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0)).ok()
}

fn map_others(others: &mut Vec<HeadBox>, f: impl Fn(f64, f64) -> (f64, f64)) {
    *others = others.iter().filter_map(|b| map_box(b, &f)).collect();
}

fn random_crop<T: Scalar, R: Rng + ?Sized>(
    img: ImageTensor<T>,
    sample: &mut GazeSample,
    others: &mut Vec<HeadBox>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> ImageTensor<T> {
    let [lo, hi] = cfg.crop_scale;
    if lo >= 1.0 {
        return img;
    }
    let (_, h, w) = img.dim();
    let head = sample.head;
    let hx0 = (head.x_min * w as f64).floor() as usize;
    let hy0 = (head.y_min * h as f64).floor() as usize;
    let hx1 = ((head.x_max * w as f64).ceil() as usize).min(w);
    let hy1 = ((head.y_max * h as f64).ceil() as usize).min(h);
    for _ in 0..cfg.max_crop_attempts.max(1) {
        let scale = rng.random_range(lo..=hi);
        let cw = ((scale * w as f64).round() as usize).clamp(1, w);
        let ch = ((scale * h as f64).round() as usize).clamp(1, h);
        // the crop must contain the whole head box
        let (x_lo, x_hi) = (hx1.saturating_sub(cw), hx0.min(w - cw));
        let (y_lo, y_hi) = (hy1.saturating_sub(ch), hy0.min(h - ch));
        if x_lo > x_hi || y_lo > y_hi || cw < hx1 - hx0 || ch < hy1 - hy0 {
            continue;
        }
        let x0 = rng.random_range(x_lo..=x_hi);
        let y0 = rng.random_range(y_lo..=y_hi);
        let map = |x: f64, y: f64| {
            (
                (x * w as f64 - x0 as f64) / cw as f64,
                (y * h as f64 - y0 as f64) / ch as f64,
            )
        };
        let (bx0, by0) = map(head.x_min, head.y_min);
        let (bx1, by1) = map(head.x_max, head.y_max);
        let Ok(new_head) = HeadBox::new(
            bx0.clamp(0.0, 1.0),
            by0.clamp(0.0, 1.0),
            bx1.clamp(0.0, 1.0),
            by1.clamp(0.0, 1.0),
        ) else {
            continue;
        };
        sample.head = new_head;
        keep_points_in_frame(sample, map);
        map_others(others, map);
        return img.slice(s![.., y0..y0 + ch, x0..x0 + cw]).to_owned();
    }
    img
}

fn flip<T: Scalar>(img: ImageTensor<T>, sample: &mut GazeSample, others: &mut Vec<HeadBox>) -> ImageTensor<T> {
    let flipped = img.slice(s![.., .., ..;-1]).to_owned();
    let b = sample.head;
    sample.head = HeadBox {
        x_min: 1.0 - b.x_max,
        y_min: b.y_min,
        x_max: 1.0 - b.x_min,
        y_max: b.y_max,
    };
    for p in &mut sample.gaze_points {
        p.0 = 1.0 - p.0;
    }
    map_others(others, |x, y| (1.0 - x, y));
    flipped
}

fn rotate<T: Scalar>(
    img: ImageTensor<T>,
    sample: &mut GazeSample,
    others: &mut Vec<HeadBox>,
    degrees: f64,
) -> ImageTensor<T> {
    let (c, h, w) = img.dim();
    let (wf, hf) = (w as f64, h as f64);
    let (cx, cy) = (0.5 * wf, 0.5 * hf);
    let (sin, cos) = degrees.to_radians().sin_cos();
    // forward map on normalised coordinates, through pixel space
    let fwd = |x: f64, y: f64| {
        let (px, py) = (x * wf - cx, y * hf - cy);
        ((cos * px - sin * py + cx) / wf, (sin * px + cos * py + cy) / hf)
    };
    let Some(new_head) = map_box(&sample.head, fwd) else {
        return img;
    };
    sample.head = new_head;
    keep_points_in_frame(sample, fwd);
    map_others(others, fwd);

    let mut out = Array3::zeros((c, h, w));
    for v in 0..h {
        for u in 0..w {
            let (ox, oy) = (u as f64 + 0.5 - cx, v as f64 + 0.5 - cy);
            // inverse rotation, back to index space
            let sx = cos * ox + sin * oy + cx - 0.5;
            let sy = -sin * ox + cos * oy + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (xi, yi) = (x0 + dx, y0 + dy);
                    let wgt = wx * wy;
                    if wgt == 0.0 || xi < 0.0 || yi < 0.0 || xi >= wf || yi >= hf {
                        continue;
                    }
                    let wt = T::lit(wgt);
                    for ch in 0..c {
                        out[(ch, v, u)] += wt * img[(ch, yi as usize, xi as usize)];
                    }
                }
            }
        }
    }
    out
}

/// Apply the geometric and photometric augmentation chain.
///
/// Geometry is applied consistently to pixels, head box and gaze points. A
/// crop or rotation that pushes every gaze annotation out of frame turns the
/// sample into an outside sample for this draw.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    sample: &GazeSample,
    image: &ImageTensor<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (ImageTensor<T>, GazeSample) {
    let (img, sample, _) = augment_scene(sample, &[], image, cfg, rng);
    (img, sample)
}

/// [`augment`] that also carries the other head boxes of the frame through
/// the same geometry. Boxes that leave the frame are dropped.
pub fn augment_scene<T: Scalar, R: Rng + ?Sized>(
    sample: &GazeSample,
    other_heads: &[HeadBox],
    image: &ImageTensor<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (ImageTensor<T>, GazeSample, Vec<HeadBox>) {
    let mut sample = sample.clone();
    let mut others = other_heads.to_vec();
    let mut img = image.clone();
    if cfg.bbox_jitter_frac > 0.0 {
        sample.head = jitter_box(sample.head, cfg.bbox_jitter_frac, rng);
    }
    color_jitter(&mut img, cfg, rng);
    img = random_crop(img, &mut sample, &mut others, cfg, rng);
    if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
        img = flip(img, &mut sample, &mut others);
    }
    if cfg.rotation_deg > 0.0 {
        let deg = uniform(rng, cfg.rotation_deg);
        if deg != 0.0 {
            img = rotate(img, &mut sample, &mut others, deg);
        }
    }
    debug_assert!(img.len_of(Axis(0)) == 3);
    (img, sample, others)
}

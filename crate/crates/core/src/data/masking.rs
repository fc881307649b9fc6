use ndarray::Array2;
use rand::Rng;

use super::{HeadBox, ImageTensor};
use crate::grid::PatchGrid;

/// Fraction of `rect` covered by the union of `boxes`.
pub fn head_overlap_fraction(boxes: &[HeadBox], rect: [f64; 4]) -> f64 {
    let area = (rect[2] - rect[0]) * (rect[3] - rect[1]);
    if area <= 0.0 || boxes.is_empty() {
        return 0.0;
    }
    let clipped: Vec<[f64; 4]> = boxes
        .iter()
        .map(|b| {
            [
                b.x_min.max(rect[0]),
                b.y_min.max(rect[1]),
                b.x_max.min(rect[2]),
                b.y_max.min(rect[3]),
            ]
        })
        .filter(|c| c[0] < c[2] && c[1] < c[3])
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped.iter().flat_map(|c| [c[0], c[2]]).collect();
    let mut ys: Vec<f64> = clipped.iter().flat_map(|c| [c[1], c[3]]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    xs.dedup();
    ys.dedup();
    let mut covered = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (cx, cy) = (0.5 * (xw[0] + xw[1]), 0.5 * (yw[0] + yw[1]));
            if clipped
                .iter()
                .any(|c| c[0] <= cx && cx <= c[2] && c[1] <= cy && cy <= c[3])
            {
                covered += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    (covered / area).min(1.0)
}

/// Draw the background-patch mask used for mask-token substitution.
///
/// A patch is background when the union of `head_boxes` covers less than
/// `threshold` of its area; each background patch is flagged independently
/// with probability `prob`. Pixels are left untouched: flagged patches are
/// swapped for the backbone's mask token at embedding time.
pub fn mask_background_patches<T, R: Rng + ?Sized>(
    image: ImageTensor<T>,
    head_boxes: &[HeadBox],
    grid: PatchGrid,
    prob: f64,
    threshold: f64,
    rng: &mut R,
) -> (ImageTensor<T>, Array2<bool>) {
    debug_assert_eq!(
        (image.dim().1, image.dim().2),
        grid.image_size(),
        "grid must tile the image"
    );
    let mut mask = Array2::from_elem((grid.h, grid.w), false);
    if prob <= 0.0 {
        return (image, mask);
    }
    for ((row, col), m) in mask.indexed_iter_mut() {
        let frac = head_overlap_fraction(head_boxes, grid.patch_rect(row, col));
        if frac < threshold {
            *m = prob >= 1.0 || rng.random::<f64>() < prob;
        }
    }
    (image, mask)
}

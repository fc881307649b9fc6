//! Procedural scenes for smoke tests: a solid background, a drawn head
//! box and a single planted gaze-target dot.

use ndarray::Array3;
use rand::Rng;

use super::{GazeSample, HeadBox, ImageTensor, Split};

const HEAD_COLOR: [f32; 3] = [0.93, 0.76, 0.62];
const DOT_COLOR: [f32; 3] = [1.0, 1.0, 1.0];

/// Draw one synthetic scene of `size × size` pixels.
///
/// The dot has radius `dot_radius` pixels and never overlaps the head box.
pub fn synthetic_scene<R: Rng + ?Sized>(
    size: usize,
    dot_radius: f64,
    image_ref: &str,
    rng: &mut R,
) -> (ImageTensor<f32>, GazeSample) {
    let bg: [f32; 3] = [
        rng.random_range(0.0..0.5),
        rng.random_range(0.0..0.5),
        rng.random_range(0.0..0.5),
    ];
    let sf = size as f64;
    let bw = rng.random_range(0.12..0.2);
    let bh = rng.random_range(0.12..0.2);
    let x0 = rng.random_range(0.0..1.0 - bw);
    let y0 = rng.random_range(0.0..1.0 - bh);
    let head = HeadBox::new(x0, y0, x0 + bw, y0 + bh).expect("valid synthetic box");
    let margin = (dot_radius + 1.0) / sf;
    let gaze = loop {
        let gx = rng.random_range(margin..1.0 - margin);
        let gy = rng.random_range(margin..1.0 - margin);
        let clear_x = gx + margin < head.x_min || gx - margin > head.x_max;
        let clear_y = gy + margin < head.y_min || gy - margin > head.y_max;
        if clear_x || clear_y {
            break (gx, gy);
        }
    };
    let img = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let (px, py) = ((x as f64 + 0.5) / sf, (y as f64 + 0.5) / sf);
        let (dx, dy) = ((x as f64 + 0.5) - gaze.0 * sf, (y as f64 + 0.5) - gaze.1 * sf);
        if dx * dx + dy * dy <= dot_radius * dot_radius {
            DOT_COLOR[c]
        } else if px >= head.x_min && px <= head.x_max && py >= head.y_min && py <= head.y_max {
            HEAD_COLOR[c]
        } else {
            bg[c]
        }
    });
    let sample = GazeSample {
        image_ref: image_ref.to_string(),
        head,
        gaze_points: vec![gaze],
        inside: true,
        split: Split::Train,
    };
    (img, sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_rng;

    #[test]
    fn scenes_are_valid_and_reproducible() {
        for i in 0..8 {
            let (a, s) = synthetic_scene(112, 6.0, "x", &mut sample_rng(5, i));
            let (b, t) = synthetic_scene(112, 6.0, "x", &mut sample_rng(5, i));
            assert_eq!(a, b);
            assert_eq!(s, t);
            s.validate().unwrap();
            let (gx, gy) = s.gaze_points[0];
            let (px, py) = ((gx * 112.0) as usize, (gy * 112.0) as usize);
            assert_eq!(a[(0, py, px)], 1.0);
        }
    }
}

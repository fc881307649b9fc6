use crate::{Error, Result};

/// Patch tiling of an input image: `h × w` patches of side `patch` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, patch: usize) -> Self {
        Self { h, w, patch }
    }

    /// Grid for an `height × width` image; both sides must be multiples of `patch`.
    pub fn for_image(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Shape(format!(
                "image {height}x{width} is not divisible into {patch}px patches"
            )));
        }
        Ok(Self::new(height / patch, width / patch, patch))
    }

    pub fn num_patches(&self) -> usize {
        self.h * self.w
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.h * self.patch, self.w * self.patch)
    }

    /// Normalised `[x0, y0, x1, y1]` extent of patch `(row, col)`.
    pub fn patch_rect(&self, row: usize, col: usize) -> [f64; 4] {
        let (h, w) = (self.h as f64, self.w as f64);
        [
            col as f64 / w,
            row as f64 / h,
            (col + 1) as f64 / w,
            (row + 1) as f64 / h,
        ]
    }

    /// Row-major patch index containing the normalised point `(x, y)`.
    pub fn patch_at(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x * self.w as f64).floor().max(0.0) as usize).min(self.w - 1);
        let row = ((y * self.h as f64).floor().max(0.0) as usize).min(self.h - 1);
        (row, col)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        assert_eq!(PatchGrid::for_image(224, 224, 14).unwrap().num_patches(), 256);
        assert_eq!(PatchGrid::for_image(518, 518, 14).unwrap(), PatchGrid::new(37, 37, 14));
        assert!(matches!(PatchGrid::for_image(225, 224, 14), Err(Error::Shape(_))));
    }
}

//! Binary pixel masks and patch rasterization.
//!
//! Patch rectangles are real-valued during optimization; the mask is where
//! they meet the pixel grid. Snapping is deterministic: each edge coordinate
//! is rounded half-up to an integer, and a pixel belongs to the patch iff
//! its center lies inside the snapped rectangle — equivalently, rows
//! `[rhu(y0), rhu(y1))` and columns `[rhu(x0), rhu(x1))`. Rounding is
//! monotone, so rectangles that are disjoint (or merely touching) in real
//! coordinates stay disjoint after snapping.

use ndarray::Array2;

use crate::error::{BgError, Result};
use crate::patches::PatchSet;

/// Round half up: `rhu(2.5) = 3`, `rhu(-0.5) = 0`.
#[inline]
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Integer pixel footprint of a real-valued rectangle given by corner
/// coordinates: half-open row/column ranges after snapping.
#[inline]
pub fn snapped_span(x0: f64, y0: f64, x1: f64, y1: f64) -> (i64, i64, i64, i64) {
    (
        round_half_up(x0),
        round_half_up(y0),
        round_half_up(x1),
        round_half_up(y1),
    )
}

/// Binary mask over the pixel grid, `(height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    data: Array2<bool>,
}

impl PixelMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), false),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[[y, x]] = value;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }
}

/// Rasterizes the union of patch rectangles onto a `height`×`width` grid.
///
/// Every patch must lie inside the image (its snapped footprint is checked
/// against the grid). Overlap between patches is a `PatchSet` invariant and
/// is rejected before rasterization by [`PatchSet::validate`]; this routine
/// only unions footprints.
pub fn rasterize(patches: &PatchSet, height: usize, width: usize) -> Result<PixelMask> {
    let mut mask = PixelMask::zeros(height, width);
    for (i, patch) in patches.iter().enumerate() {
        let (x0, y0, x1, y1) = patch.rect.corners();
        let (sx0, sy0, sx1, sy1) = snapped_span(x0, y0, x1, y1);
        if sx0 < 0 || sy0 < 0 || sx1 > width as i64 || sy1 > height as i64 {
            return Err(BgError::PatchOutOfBounds(format!(
                "patch {i} spans columns {sx0}..{sx1}, rows {sy0}..{sy1} \
                 on a {width}x{height} image"
            )));
        }
        for y in sy0.max(0)..sy1 {
            for x in sx0.max(0)..sx1 {
                mask.data[[y as usize, x as usize]] = true;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BoxCwh;
    use crate::patches::Patch;

    fn patch(cx: f64, cy: f64, w: f64, h: f64) -> Patch {
        Patch {
            group_id: 0,
            rect: BoxCwh::new(cx, cy, w, h).unwrap(),
        }
    }

    #[test]
    fn round_half_up_behaviour() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(-0.5), 0);
        assert_eq!(round_half_up(-0.51), -1);
    }

    #[test]
    fn empty_patch_set_rasterizes_to_zero_mask() {
        let mask = rasterize(&PatchSet::new(vec![]), 10, 12).unwrap();
        assert!(mask.is_empty());
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn integer_aligned_patch_covers_exact_area() {
        // 10x10 patch aligned to the grid → exactly 100 pixels.
        let mask = rasterize(&PatchSet::new(vec![patch(10.0, 10.0, 10.0, 10.0)]), 32, 32).unwrap();
        assert_eq!(mask.count(), 100);
        assert!(mask.get(5, 5));
        assert!(mask.get(14, 14));
        assert!(!mask.get(15, 15));
        assert!(!mask.get(4, 5));
    }

    #[test]
    fn fractional_edges_snap_half_up() {
        // Corners (1.4, 0) to (4.6, 1): columns rhu(1.4)=1 .. rhu(4.6)=5.
        let mask = rasterize(&PatchSet::new(vec![patch(3.0, 0.5, 3.2, 1.0)]), 4, 8).unwrap();
        let cols: Vec<usize> = (0..8).filter(|&x| mask.get(0, x)).collect();
        assert_eq!(cols, vec![1, 2, 3, 4]);
    }

    #[test]
    fn out_of_bounds_patch_rejected() {
        let err = rasterize(&PatchSet::new(vec![patch(2.0, 2.0, 10.0, 2.0)]), 8, 8);
        assert!(matches!(err, Err(BgError::PatchOutOfBounds(_))));
    }

    #[test]
    fn union_of_disjoint_patches_sums_areas() {
        let set = PatchSet::new(vec![patch(2.0, 2.0, 4.0, 4.0), patch(10.0, 10.0, 6.0, 2.0)]);
        let mask = rasterize(&set, 20, 20).unwrap();
        assert_eq!(mask.count(), 16 + 12);
    }

    #[test]
    fn touching_patches_stay_disjoint_after_snapping() {
        // Right edge of A at x=4.3, left edge of B at x=4.3.
        let a = patch(2.15, 2.0, 4.3, 4.0);
        let b = patch(6.3, 2.0, 4.0, 4.0);
        let sep = rasterize(&PatchSet::new(vec![a.clone()]), 16, 16).unwrap().count()
            + rasterize(&PatchSet::new(vec![b.clone()]), 16, 16).unwrap().count();
        let joint = rasterize(&PatchSet::new(vec![a, b]), 16, 16).unwrap().count();
        assert_eq!(sep, joint);
    }
}

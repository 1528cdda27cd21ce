//! Background patches: the rectangles that carry the perturbation.
//!
//! A patch is "background" by contract — it never overlaps a ground-truth
//! box — and the members of a [`PatchSet`] never overlap each other.
//! [`PatchSet::validate`] enforces both along with the image bounds; the
//! attack loop re-validates after every geometry step so a broken invariant
//! surfaces immediately rather than as a silently wrong mask.

use serde::{Deserialize, Serialize};

use crate::boxes::{BoxCwh, GroundTruth};
use crate::error::{BgError, Result};

/// Tolerance under which an intersection area counts as zero overlap.
const OVERLAP_EPS: f64 = 1e-9;

/// One background patch: rectangle plus the object group it was placed for.
///
/// Serializes flat as `{group_id, cx, cy, w, h}` — the on-disk patch format
/// consumed by the transfer runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub group_id: usize,
    #[serde(flatten)]
    pub rect: BoxCwh,
}

/// The current set of background patches for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    patches: Vec<Patch>,
}

impl PatchSet {
    pub fn new(patches: Vec<Patch>) -> Self {
        Self { patches }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Patch> {
        self.patches.iter()
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn patches_mut(&mut self) -> &mut [Patch] {
        &mut self.patches
    }

    /// Sum of real-valued patch areas (patches are disjoint by invariant).
    pub fn total_area(&self) -> f64 {
        self.patches.iter().map(|p| p.rect.area()).sum()
    }

    /// Checks the structural invariants: every patch inside the
    /// `width`×`height` image, zero overlap with every ground-truth box,
    /// and pairwise-disjoint patches.
    pub fn validate(&self, gt: &GroundTruth, height: usize, width: usize) -> Result<()> {
        for (i, p) in self.patches.iter().enumerate() {
            let (x0, y0, x1, y1) = p.rect.corners();
            if x0 < -OVERLAP_EPS
                || y0 < -OVERLAP_EPS
                || x1 > width as f64 + OVERLAP_EPS
                || y1 > height as f64 + OVERLAP_EPS
            {
                return Err(BgError::PatchOutOfBounds(format!(
                    "patch {i} corners ({x0:.2}, {y0:.2})-({x1:.2}, {y1:.2}) \
                     exceed {width}x{height}"
                )));
            }
            for (g, gt_box) in gt.boxes.iter().enumerate() {
                if p.rect.intersection_area(gt_box) > OVERLAP_EPS {
                    return Err(BgError::PatchOverlap(format!(
                        "patch {i} overlaps ground-truth box {g}"
                    )));
                }
            }
            for (j, q) in self.patches.iter().enumerate().skip(i + 1) {
                if p.rect.intersection_area(&q.rect) > OVERLAP_EPS {
                    return Err(BgError::PatchOverlap(format!("patches {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a PatchSet {
    type Item = &'a Patch;
    type IntoIter = std::slice::Iter<'a, Patch>;
    fn into_iter(self) -> Self::IntoIter {
        self.patches.iter()
    }
}

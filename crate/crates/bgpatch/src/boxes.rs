//! Axis-aligned boxes in center/size form, ground-truth annotations, and the
//! rectangle geometry (IoU, minimum distance) everything else builds on.

use serde::{Deserialize, Serialize};

use crate::error::{BgError, Result};

/// Axis-aligned rectangle stored as center plus width/height, in pixels.
///
/// Corner form is derived on demand as
/// `(cx - w/2, cy - h/2, cx + w/2, cy + h/2)`. Width and height must be
/// strictly positive; [`BoxCwh::new`] is the validating constructor and all
/// geometric operations assume boxes were built through it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCwh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCwh {
    /// Builds a box, rejecting non-positive or non-finite dimensions.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(BgError::InvalidArgument(format!(
                "box fields must be finite, got ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(BgError::InvalidArgument(format!(
                "box sides must be positive, got w={w}, h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds from corner form `(x0, y0, x1, y1)`, requiring `x1 > x0` and
    /// `y1 > y0`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// Builds from top-left form `(x, y, w, h)` as used by COCO annotations.
    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// Corner form `(x0, y0, x1, y1)`.
    #[inline]
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The longer of the two sides.
    #[inline]
    pub fn longest_side(&self) -> f64 {
        self.w.max(self.h)
    }

    /// Geometric mean of the two sides; the linear "size" used when patch
    /// areas are derived from object areas.
    #[inline]
    pub fn geometric_mean_side(&self) -> f64 {
        (self.w * self.h).sqrt()
    }

    /// Area of the intersection with `other` (0 when disjoint; touching
    /// rectangles intersect with zero area).
    #[inline]
    pub fn intersection_area(&self, other: &BoxCwh) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        iw * ih
    }
}

/// Intersection-over-union of two boxes, in `[0, 1]`. Symmetric.
pub fn iou(a: &BoxCwh, b: &BoxCwh) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Minimum Euclidean distance between the point sets of two rectangles;
/// zero when they touch or overlap.
pub fn box_min_distance(a: &BoxCwh, b: &BoxCwh) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let dx = (bx0 - ax1).max(ax0 - bx1).max(0.0);
    let dy = (by0 - ay1).max(ay0 - by1).max(0.0);
    (dx * dx + dy * dy).sqrt()
}

/// Object annotations for one image: boxes plus class labels.
///
/// Labels index object classes `1..=C`; index 0 is reserved for the
/// background class and never appears here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BoxCwh>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BoxCwh>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(BgError::InvalidArgument(format!(
                "{} boxes but {} labels",
                boxes.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l == 0) {
            return Err(BgError::InvalidArgument(format!(
                "label at index {i} is the background index 0"
            )));
        }
        Ok(Self { boxes, labels })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

//! Patch placement: grouping objects, choosing initial patch rectangles by
//! gradient mass, and growing patches stride by stride.
//!
//! Placement never touches pixels itself — it only proposes rectangles.
//! Three rules hold at every step and are re-checked on every proposal:
//! patches stay fully inside the image, never overlap any annotated object
//! (zero IoU; touching is fine), and never overlap each other. On top of
//! that, each patch keeps a minimum distance to the objects of its own
//! group so the perturbation stays visibly "background".
//!
//! All decisions are deterministic: candidate windows are scored by the
//! gradient mass under their pixel footprint and ties fall back to
//! row-major window order; expansion direction ties resolve in the fixed
//! order left, right, top, down.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::boxes::{box_min_distance, BoxCwh, GroundTruth};
use crate::error::{BgError, Result};
use crate::mask::snapped_span;
use crate::patches::{Patch, PatchSet};

/// A cluster of ground-truth objects attacked as one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectGroup {
    /// Ground-truth indices of the members, ascending.
    pub members: Vec<usize>,
    /// Hull of the member boxes.
    pub bounding_region: BoxCwh,
    /// Longest box side among the members, in pixels.
    pub largest_side: f64,
}

/// How patch-to-object distance is constrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PlacementRule {
    /// Keep at least `min_dist_factor` × the group's largest object side
    /// between a patch and every object of its group.
    MinGap,
    /// Place patches so their distance to the nearest group object is
    /// `factor` × the group's largest object side, within one stride.
    /// Expansion may not shrink the distance below that band.
    Ring { factor: f64 },
}

/// Placement and growth parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    /// Patches placed per object group.
    pub patches_per_group: usize,
    /// Linear scale of an initial patch relative to its object: a patch
    /// starts at `init_scale²` of the object's box area.
    pub init_scale: f64,
    /// Width/height ratios tried for every initial patch, at equal area.
    pub aspect_ratios: Vec<f64>,
    /// Minimum patch-object gap, as a fraction of the group's largest
    /// object side (used by [`PlacementRule::MinGap`]).
    pub min_dist_factor: f64,
    /// Growth per iteration and sliding-window step, as a fraction of the
    /// shorter image side.
    pub expand_stride_factor: f64,
    /// Objects closer than this fraction of the shorter image side are
    /// clustered into one group.
    pub cluster_threshold_factor: f64,
    pub placement: PlacementRule,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            patches_per_group: 3,
            init_scale: 0.2,
            aspect_ratios: vec![1.0, 0.67, 0.75, 1.5, 1.33],
            min_dist_factor: 0.2,
            expand_stride_factor: 0.02,
            cluster_threshold_factor: 0.2,
            placement: PlacementRule::MinGap,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches_per_group == 0 {
            return Err(BgError::Config("patches_per_group must be >= 1".into()));
        }
        let positive = [
            ("init_scale", self.init_scale),
            ("min_dist_factor", self.min_dist_factor),
            ("expand_stride_factor", self.expand_stride_factor),
            ("cluster_threshold_factor", self.cluster_threshold_factor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(BgError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.aspect_ratios.is_empty()
            || self.aspect_ratios.iter().any(|&r| !(r.is_finite() && r > 0.0))
        {
            return Err(BgError::Config(
                "aspect_ratios must be nonempty and positive".into(),
            ));
        }
        if let PlacementRule::Ring { factor } = self.placement {
            if !(factor.is_finite() && factor >= 0.0) {
                return Err(BgError::Config(format!(
                    "ring distance factor must be >= 0, got {factor}"
                )));
            }
        }
        Ok(())
    }

    /// Growth / sliding-window stride in pixels for an image.
    pub fn stride(&self, height: usize, width: usize) -> f64 {
        self.expand_stride_factor * height.min(width) as f64
    }

    /// Clustering threshold in pixels for an image.
    pub fn cluster_threshold(&self, height: usize, width: usize) -> f64 {
        self.cluster_threshold_factor * height.min(width) as f64
    }
}

/// One expansion verdict for one patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionDecision {
    pub patch_index: usize,
    /// `None` when all four directions are blocked.
    pub direction: Option<GrowDirection>,
    /// Gradient mass under the pixels the growth added.
    pub gain: f64,
}

/// Growth directions, in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowDirection {
    Left,
    Right,
    Top,
    Down,
}

const ALL_DIRECTIONS: [GrowDirection; 4] = [
    GrowDirection::Left,
    GrowDirection::Right,
    GrowDirection::Top,
    GrowDirection::Down,
];

/// Tolerance for geometric comparisons on pixel-scale coordinates.
const GEOM_EPS: f64 = 1e-9;

/// Groups objects by single-linkage agglomeration: two objects share a
/// group when a chain of pairwise box distances, each at most the cluster
/// threshold, connects them. Groups are ordered by their smallest member
/// index; an empty ground truth yields no groups.
pub fn cluster_objects(
    gt: &GroundTruth,
    height: usize,
    width: usize,
    cfg: &GeometryConfig,
) -> Vec<ObjectGroup> {
    let n = gt.len();
    if n == 0 {
        return Vec::new();
    }
    let threshold = cfg.cluster_threshold(height, width);
    // Union-find over object indices.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if box_min_distance(&gt.boxes[i], &gt.boxes[j]) <= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    // Root at the smaller index keeps ordering natural.
                    let (lo, hi) = (ri.min(rj), ri.max(rj));
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut by_root: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        match by_root.iter_mut().find(|(r, _)| *r == root) {
            Some((_, members)) => members.push(i),
            None => by_root.push((root, vec![i])),
        }
    }
    by_root.sort_by_key(|(_, members)| members[0]);
    by_root
        .into_iter()
        .map(|(_, members)| build_group(members, gt))
        .collect()
}

fn build_group(members: Vec<usize>, gt: &GroundTruth) -> ObjectGroup {
    let mut x1 = f64::INFINITY;
    let mut y1 = f64::INFINITY;
    let mut x2 = f64::NEG_INFINITY;
    let mut y2 = f64::NEG_INFINITY;
    let mut largest = 0.0f64;
    for &i in &members {
        let b = &gt.boxes[i];
        let (bx1, by1, bx2, by2) = b.corners();
        x1 = x1.min(bx1);
        y1 = y1.min(by1);
        x2 = x2.max(bx2);
        y2 = y2.max(by2);
        largest = largest.max(b.w.max(b.h));
    }
    ObjectGroup {
        members,
        bounding_region: BoxCwh::from_corners(x1, y1, x2, y2)
            .expect("hull of valid boxes is valid"),
        largest_side: largest,
    }
}

/// Per-pixel gradient magnitude (L1 over channels) with a summed-area
/// table for O(1) rectangle sums.
pub struct GradientField {
    height: usize,
    width: usize,
    /// `(height+1, width+1)` inclusive-exclusive summed-area table.
    integral: Array2<f64>,
}

impl GradientField {
    /// Builds the field from a `(H, W, 3)` gradient array.
    pub fn new(grad: &Array3<f64>) -> Result<Self> {
        let (h, w, c) = grad.dim();
        if c != 3 {
            return Err(BgError::ShapeMismatch(format!(
                "gradient must have 3 channels, got {c}"
            )));
        }
        let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
        for y in 0..h {
            let mut row_sum = 0.0;
            for x in 0..w {
                let mag =
                    grad[[y, x, 0]].abs() + grad[[y, x, 1]].abs() + grad[[y, x, 2]].abs();
                row_sum += mag;
                integral[[y + 1, x + 1]] = integral[[y, x + 1]] + row_sum;
            }
        }
        Ok(Self { height: h, width: w, integral })
    }

    /// Sum over the half-open pixel rows `y0..y1`, columns `x0..x1`.
    fn span_sum(&self, y0: i64, y1: i64, x0: i64, x1: i64) -> f64 {
        let y0 = y0.clamp(0, self.height as i64) as usize;
        let y1 = y1.clamp(0, self.height as i64) as usize;
        let x0 = x0.clamp(0, self.width as i64) as usize;
        let x1 = x1.clamp(0, self.width as i64) as usize;
        if y0 >= y1 || x0 >= x1 {
            return 0.0;
        }
        self.integral[[y1, x1]] - self.integral[[y0, x1]] - self.integral[[y1, x0]]
            + self.integral[[y0, x0]]
    }

    /// Gradient mass under a rectangle's snapped pixel footprint — the
    /// same pixels a mask rasterization of that rectangle would select.
    pub fn rect_mass(&self, rect: &BoxCwh) -> f64 {
        let (x1, y1, x2, y2) = rect.corners();
        let (sx1, sy1, sx2, sy2) = snapped_span(x1, y1, x2, y2);
        self.span_sum(sy1, sy2, sx1, sx2)
    }
}

/// A group that could not get its full patch allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitShortfall {
    pub group_id: usize,
    pub requested: usize,
    pub placed: usize,
}

/// True when `rect` lies fully inside the image.
fn inside_image(rect: &BoxCwh, height: usize, width: usize) -> bool {
    let (x1, y1, x2, y2) = rect.corners();
    x1 >= -GEOM_EPS
        && y1 >= -GEOM_EPS
        && x2 <= width as f64 + GEOM_EPS
        && y2 <= height as f64 + GEOM_EPS
}

/// True when `rect` overlaps no ground-truth box (touching allowed).
fn clear_of_objects(rect: &BoxCwh, gt: &GroundTruth) -> bool {
    gt.boxes.iter().all(|b| rect.intersection_area(b) <= GEOM_EPS)
}

/// True when `rect` overlaps none of `chosen` (touching allowed).
fn clear_of_patches(rect: &BoxCwh, chosen: &[Patch]) -> bool {
    chosen.iter().all(|p| rect.intersection_area(&p.rect) <= GEOM_EPS)
}

/// Distance from `rect` to the nearest member object of `group`.
fn distance_to_group(rect: &BoxCwh, group: &ObjectGroup, gt: &GroundTruth) -> f64 {
    group
        .members
        .iter()
        .map(|&i| box_min_distance(rect, &gt.boxes[i]))
        .fold(f64::INFINITY, f64::min)
}

/// Distance constraint at initialization.
fn init_distance_ok(
    rect: &BoxCwh,
    group: &ObjectGroup,
    gt: &GroundTruth,
    cfg: &GeometryConfig,
    stride: f64,
) -> bool {
    let d = distance_to_group(rect, group, gt);
    match cfg.placement {
        PlacementRule::MinGap => d + GEOM_EPS >= cfg.min_dist_factor * group.largest_side,
        PlacementRule::Ring { factor } => {
            (d - factor * group.largest_side).abs() <= stride + GEOM_EPS
        }
    }
}

/// Distance constraint during expansion. Growth can only reduce the
/// distance, so only the lower bound is enforced; ring placement tolerates
/// the same one-stride band it was initialized with.
fn expand_distance_ok(
    rect: &BoxCwh,
    group: &ObjectGroup,
    gt: &GroundTruth,
    cfg: &GeometryConfig,
    stride: f64,
) -> bool {
    let d = distance_to_group(rect, group, gt);
    match cfg.placement {
        PlacementRule::MinGap => d + GEOM_EPS >= cfg.min_dist_factor * group.largest_side,
        PlacementRule::Ring { factor } => {
            d + GEOM_EPS >= factor * group.largest_side - stride
        }
    }
}

/// Initial patch sizes tried for a group: one area per member object
/// (`init_scale²` × object area), reshaped to every aspect ratio at
/// constant area. Duplicate sizes collapse.
pub(crate) fn candidate_dims(
    group: &ObjectGroup,
    gt: &GroundTruth,
    cfg: &GeometryConfig,
) -> Vec<(f64, f64)> {
    let mut dims: Vec<(f64, f64)> = Vec::new();
    for &gi in &group.members {
        let area = cfg.init_scale * cfg.init_scale * gt.boxes[gi].area();
        for &ratio in &cfg.aspect_ratios {
            let w = (area * ratio).sqrt();
            let h = (area / ratio).sqrt();
            if !dims
                .iter()
                .any(|&(ew, eh)| (ew - w).abs() < 1e-12 && (eh - h).abs() < 1e-12)
            {
                dims.push((w, h));
            }
        }
    }
    dims
}

/// Places up to `patches_per_group` patches per group by sliding a window
/// over the stride lattice and keeping the feasible positions with the
/// largest gradient mass (ties: row-major position, then candidate-size
/// order). Groups are processed in id order and later patches must not
/// overlap earlier ones, across groups included. A group that cannot fit
/// its full allocation is reported, never an error.
pub fn init_patches(
    groups: &[ObjectGroup],
    gt: &GroundTruth,
    grad: &Array3<f64>,
    height: usize,
    width: usize,
    cfg: &GeometryConfig,
) -> Result<(PatchSet, Vec<InitShortfall>)> {
    cfg.validate()?;
    check_grad_dims(grad, height, width)?;
    let field = GradientField::new(grad)?;
    let stride = cfg.stride(height, width);
    let mut chosen: Vec<Patch> = Vec::new();
    let mut shortfalls = Vec::new();

    for (group_id, group) in groups.iter().enumerate() {
        let dims = candidate_dims(group, gt, cfg);
        // (score, y0, x0, dim index) for every feasible window.
        let mut candidates: Vec<(f64, f64, f64, usize)> = Vec::new();
        for (di, &(w, h)) in dims.iter().enumerate() {
            if w > width as f64 || h > height as f64 {
                continue;
            }
            let mut y0 = 0.0;
            while y0 + h <= height as f64 + GEOM_EPS {
                let mut x0 = 0.0;
                while x0 + w <= width as f64 + GEOM_EPS {
                    let rect = BoxCwh::from_top_left(x0, y0, w, h)
                        .expect("lattice window is a valid box");
                    if clear_of_objects(&rect, gt)
                        && init_distance_ok(&rect, group, gt, cfg, stride)
                    {
                        candidates.push((field.rect_mass(&rect), y0, x0, di));
                    }
                    x0 += stride;
                }
                y0 += stride;
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });

        let mut placed = 0;
        for &(_, y0, x0, di) in &candidates {
            if placed == cfg.patches_per_group {
                break;
            }
            let (w, h) = dims[di];
            let rect = BoxCwh::from_top_left(x0, y0, w, h).expect("validated above");
            if clear_of_patches(&rect, &chosen) {
                chosen.push(Patch { group_id, rect });
                placed += 1;
            }
        }
        if placed < cfg.patches_per_group {
            shortfalls.push(InitShortfall {
                group_id,
                requested: cfg.patches_per_group,
                placed,
            });
        }
    }
    Ok((PatchSet::new(chosen), shortfalls))
}

/// The rectangle `rect` grown by `stride` in one direction.
fn grown(rect: &BoxCwh, dir: GrowDirection, stride: f64) -> BoxCwh {
    let half = stride / 2.0;
    match dir {
        GrowDirection::Left => BoxCwh {
            cx: rect.cx - half,
            cy: rect.cy,
            w: rect.w + stride,
            h: rect.h,
        },
        GrowDirection::Right => BoxCwh {
            cx: rect.cx + half,
            cy: rect.cy,
            w: rect.w + stride,
            h: rect.h,
        },
        GrowDirection::Top => BoxCwh {
            cx: rect.cx,
            cy: rect.cy - half,
            w: rect.w,
            h: rect.h + stride,
        },
        GrowDirection::Down => BoxCwh {
            cx: rect.cx,
            cy: rect.cy + half,
            w: rect.w,
            h: rect.h + stride,
        },
    }
}

/// Grows each patch by one stride towards the direction whose added strip
/// carries the most gradient mass. Directions that would leave the image,
/// overlap an object or another patch, or violate the distance rule are
/// blocked; a fully blocked patch stays as it is. Patches are processed in
/// index order, each seeing the already-grown shapes of its predecessors.
///
/// Object groups are derived from `gt` with the same config the patches
/// were initialized under; a patch whose `group_id` has no matching group
/// (an empty ground truth) is exempt from the distance rule.
pub fn expand_patches(
    patches: &PatchSet,
    grad: &Array3<f64>,
    gt: &GroundTruth,
    height: usize,
    width: usize,
    cfg: &GeometryConfig,
) -> Result<(PatchSet, Vec<ExpansionDecision>)> {
    cfg.validate()?;
    check_grad_dims(grad, height, width)?;
    let field = GradientField::new(grad)?;
    let stride = cfg.stride(height, width);
    let groups = cluster_objects(gt, height, width, cfg);
    let mut current: Vec<Patch> = patches.patches().to_vec();
    let mut decisions = Vec::with_capacity(current.len());

    for i in 0..current.len() {
        let patch = current[i].clone();
        let group = groups.get(patch.group_id);
        let base_mass = field.rect_mass(&patch.rect);
        let others: Vec<Patch> = current
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| p.clone())
            .collect();
        let mut best: Option<(GrowDirection, f64)> = None;
        for dir in ALL_DIRECTIONS {
            let cand = grown(&patch.rect, dir, stride);
            if !inside_image(&cand, height, width) || !clear_of_objects(&cand, gt) {
                continue;
            }
            if let Some(g) = group {
                if !expand_distance_ok(&cand, g, gt, cfg, stride) {
                    continue;
                }
            }
            if !clear_of_patches(&cand, &others) {
                continue;
            }
            let gain = field.rect_mass(&cand) - base_mass;
            let better = match best {
                None => true,
                Some((_, bg)) => gain > bg,
            };
            if better {
                best = Some((dir, gain));
            }
        }
        match best {
            Some((dir, gain)) => {
                current[i].rect = grown(&patch.rect, dir, stride);
                decisions.push(ExpansionDecision {
                    patch_index: i,
                    direction: Some(dir),
                    gain,
                });
            }
            None => decisions.push(ExpansionDecision {
                patch_index: i,
                direction: None,
                gain: 0.0,
            }),
        }
    }
    Ok((PatchSet::new(current), decisions))
}

fn check_grad_dims(grad: &Array3<f64>, height: usize, width: usize) -> Result<()> {
    let (h, w, c) = grad.dim();
    if (h, w, c) != (height, width, 3) {
        return Err(BgError::ShapeMismatch(format!(
            "gradient is {h}x{w}x{c}, image is {height}x{width}x3"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxCwh {
        BoxCwh::new(cx, cy, w, h).unwrap()
    }

    fn gt_of(boxes: Vec<BoxCwh>) -> GroundTruth {
        let labels = vec![1; boxes.len()];
        GroundTruth::new(boxes, labels).unwrap()
    }

    fn zero_grad(h: usize, w: usize) -> Array3<f64> {
        Array3::zeros((h, w, 3))
    }

    // ---- clustering ----

    #[test]
    fn single_object_forms_one_group() {
        let gt = gt_of(vec![b(48.0, 48.0, 20.0, 20.0)]);
        let groups = cluster_objects(&gt, 96, 96, &GeometryConfig::default());
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, vec![0]);
        assert_abs_diff_eq!(groups[0].largest_side, 20.0, epsilon = 1e-12);
        assert_eq!(groups[0].bounding_region, b(48.0, 48.0, 20.0, 20.0));
    }

    #[test]
    fn distant_objects_split_into_separate_groups() {
        // Threshold is 0.2 × 96 = 19.2 px; this gap is 25 px.
        let gt = gt_of(vec![b(20.0, 48.0, 10.0, 10.0), b(60.0, 48.0, 10.0, 10.0)]);
        let groups = cluster_objects(&gt, 96, 96, &GeometryConfig::default());
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, vec![0]);
        assert_eq!(groups[1].members, vec![1]);
    }

    #[test]
    fn chained_closeness_merges_transitively() {
        // A-B and B-C are 10 px apart; A-C is 30 px apart. Single linkage
        // still puts all three in one group.
        let gt = gt_of(vec![
            b(15.0, 48.0, 10.0, 10.0),
            b(35.0, 48.0, 10.0, 10.0),
            b(55.0, 48.0, 10.0, 10.0),
        ]);
        let groups = cluster_objects(&gt, 96, 96, &GeometryConfig::default());
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, vec![0, 1, 2]);
        // Hull spans from the left edge of A to the right edge of C.
        assert_eq!(groups[0].bounding_region, b(35.0, 48.0, 50.0, 10.0));
    }

    #[test]
    fn grouping_is_stable_under_object_reordering() {
        let boxes = vec![
            b(15.0, 20.0, 10.0, 10.0),
            b(80.0, 80.0, 12.0, 12.0),
            b(28.0, 20.0, 10.0, 10.0),
        ];
        let cfg = GeometryConfig::default();
        let forward = cluster_objects(&gt_of(boxes.clone()), 96, 96, &cfg);
        let reversed = cluster_objects(
            &gt_of(boxes.into_iter().rev().collect()),
            96,
            96,
            &cfg,
        );
        // Same partition expressed over the permuted indices: compare the
        // sets of member bounding regions instead of raw indices.
        let mut fwd_regions: Vec<_> = forward.iter().map(|g| g.bounding_region).collect();
        let mut rev_regions: Vec<_> = reversed.iter().map(|g| g.bounding_region).collect();
        let key = |r: &BoxCwh| (r.cx, r.cy);
        fwd_regions.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
        rev_regions.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
        assert_eq!(fwd_regions, rev_regions);
        assert_eq!(forward.len(), 2);
    }

    #[test]
    fn empty_ground_truth_yields_no_groups() {
        let groups =
            cluster_objects(&GroundTruth::empty(), 96, 96, &GeometryConfig::default());
        assert!(groups.is_empty());
    }

    // ---- candidate sizes ----

    #[test]
    fn candidate_sizes_preserve_area_across_aspect_ratios() {
        let gt = gt_of(vec![b(100.0, 100.0, 50.0, 50.0)]);
        let cfg = GeometryConfig::default();
        let groups = cluster_objects(&gt, 200, 200, &cfg);
        let dims = candidate_dims(&groups[0], &gt, &cfg);
        assert_eq!(dims.len(), cfg.aspect_ratios.len());
        let area = (0.2f64 * 50.0).powi(2); // 100 px²
        for (&(w, h), &ratio) in dims.iter().zip(&cfg.aspect_ratios) {
            assert_abs_diff_eq!(w * h, area, epsilon = 1e-9);
            assert_abs_diff_eq!(w / h, ratio, epsilon = 1e-9);
        }
        // Hand value for the 1.5 ratio: √150 × 100/√150.
        let (w15, h15) = dims[3];
        assert_abs_diff_eq!(w15, 150.0f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(h15, 100.0 / 150.0f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(w15, 12.2474, epsilon = 1e-4);
        assert_abs_diff_eq!(h15, 8.1650, epsilon = 1e-4);
    }

    // ---- initialization ----

    #[test]
    fn zero_gradient_places_patches_row_major() {
        let gt = gt_of(vec![b(48.0, 48.0, 20.0, 20.0)]);
        let cfg = GeometryConfig::default();
        let groups = cluster_objects(&gt, 96, 96, &cfg);
        let (patches, shortfalls) =
            init_patches(&groups, &gt, &zero_grad(96, 96), 96, 96, &cfg).unwrap();
        assert!(shortfalls.is_empty());
        assert_eq!(patches.len(), 3);
        // All scores tie at zero, so the first aspect ratio (square, 4×4)
        // walks the lattice row-major: (0,0), then the first x that no
        // longer overlaps, and so on along the top row.
        let p: Vec<&Patch> = patches.iter().collect();
        for patch in &p {
            assert_eq!(patch.group_id, 0);
            assert_abs_diff_eq!(patch.rect.w, 4.0, epsilon = 1e-9);
            assert_abs_diff_eq!(patch.rect.h, 4.0, epsilon = 1e-9);
            assert_abs_diff_eq!(patch.rect.cy, 2.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(p[0].rect.cx, 2.0, epsilon = 1e-9);
        // Stride 1.92: lattice x = 5.76 is the first non-overlapping slot.
        assert_abs_diff_eq!(p[1].rect.cx, 2.0 + 5.76, epsilon = 1e-9);
        assert_abs_diff_eq!(p[2].rect.cx, 2.0 + 11.52, epsilon = 1e-9);
    }

    #[test]
    fn strong_gradient_region_attracts_the_first_patch() {
        let gt = gt_of(vec![b(30.0, 30.0, 20.0, 20.0)]);
        let cfg = GeometryConfig::default();
        let groups = cluster_objects(&gt, 96, 96, &cfg);
        let mut grad = zero_grad(96, 96);
        for y in 70..80 {
            for x in 70..80 {
                grad[[y, x, 0]] = 5.0;
            }
        }
        let (patches, _) = init_patches(&groups, &gt, &grad, 96, 96, &cfg).unwrap();
        let first = &patches.patches()[0];
        // The best window sits inside the bright blob.
        assert!(first.rect.cx > 68.0 && first.rect.cx < 82.0, "cx = {}", first.rect.cx);
        assert!(first.rect.cy > 68.0 && first.rect.cy < 82.0, "cy = {}", first.rect.cy);
        let field = GradientField::new(&grad).unwrap();
        assert!(field.rect_mass(&first.rect) > 0.0);
    }

    #[test]
    fn patches_respect_the_minimum_object_gap() {
        // Object side 50 and factor 0.2 require a 10 px gap.
        let gt = gt_of(vec![b(100.0, 100.0, 50.0, 50.0)]);
        let cfg = GeometryConfig::default();
        let groups = cluster_objects(&gt, 200, 200, &cfg);
        let (patches, _) =
            init_patches(&groups, &gt, &zero_grad(200, 200), 200, 200, &cfg).unwrap();
        assert!(!patches.is_empty());
        for patch in &patches {
            let d = box_min_distance(&patch.rect, &gt.boxes[0]);
            assert!(d >= 10.0 - 1e-9, "patch sits {d} px from the object");
        }
        patches.validate(&gt, 200, 200).unwrap();
    }

    #[test]
    fn crowded_frame_reports_a_shortfall_instead_of_failing() {
        // A big object in a small frame: the 20 px gap requirement leaves
        // almost nowhere to stand.
        let gt = gt_of(vec![b(32.0, 32.0, 56.0, 56.0)]);
        let cfg = GeometryConfig::default();
        let groups = cluster_objects(&gt, 64, 64, &cfg);
        let (patches, shortfalls) =
            init_patches(&groups, &gt, &zero_grad(64, 64), 64, 64, &cfg).unwrap();
        assert!(patches.len() < 3);
        assert_eq!(shortfalls.len(), 1);
        assert_eq!(shortfalls[0].requested, 3);
        assert_eq!(shortfalls[0].placed, patches.len());
    }

    #[test]
    fn ring_placement_pins_the_initial_distance() {
        let gt = gt_of(vec![b(100.0, 100.0, 40.0, 40.0)]);
        let cfg = GeometryConfig {
            placement: PlacementRule::Ring { factor: 0.5 },
            ..GeometryConfig::default()
        };
        let groups = cluster_objects(&gt, 200, 200, &cfg);
        let (patches, _) =
            init_patches(&groups, &gt, &zero_grad(200, 200), 200, 200, &cfg).unwrap();
        assert!(!patches.is_empty());
        let stride = cfg.stride(200, 200);
        for patch in &patches {
            let d = box_min_distance(&patch.rect, &gt.boxes[0]);
            assert!(
                (d - 20.0).abs() <= stride + 1e-9,
                "distance {d} outside the 20 ± {stride} ring"
            );
        }
    }

    #[test]
    fn initialization_is_deterministic() {
        let gt = gt_of(vec![b(40.0, 52.0, 22.0, 18.0), b(70.0, 20.0, 14.0, 16.0)]);
        let cfg = GeometryConfig::default();
        let groups = cluster_objects(&gt, 96, 96, &cfg);
        let mut grad = zero_grad(96, 96);
        for y in 0..96 {
            for x in 0..96 {
                grad[[y, x, 1]] = ((x * 31 + y * 17) % 13) as f64;
            }
        }
        let a = init_patches(&groups, &gt, &grad, 96, 96, &cfg).unwrap();
        let b = init_patches(&groups, &gt, &grad, 96, 96, &cfg).unwrap();
        assert_eq!(a.0.patches(), b.0.patches());
        assert_eq!(a.1, b.1);
    }

    // ---- expansion ----

    /// A single 4×4 patch at the frame center with no objects.
    fn lone_patch() -> PatchSet {
        PatchSet::new(vec![Patch {
            group_id: 0,
            rect: b(48.0, 48.0, 4.0, 4.0),
        }])
    }

    #[test]
    fn expansion_follows_the_heaviest_strip_with_fixed_tie_order() {
        // Patch spans [46,50)²; stride 1.92 strips snap to two-pixel
        // bands. Weights: left 1.0, right 2.0, top 0.5, down 2.0 — right
        // wins the tie with down.
        let mut grad = zero_grad(96, 96);
        for y in 46..50 {
            grad[[y, 44, 0]] = 0.125;
            grad[[y, 45, 0]] = 0.125; // left = 1.0
            grad[[y, 50, 0]] = 0.25;
            grad[[y, 51, 0]] = 0.25; // right = 2.0
        }
        for x in 46..50 {
            grad[[44, x, 0]] = 0.0625;
            grad[[45, x, 0]] = 0.0625; // top = 0.5
            grad[[50, x, 0]] = 0.25;
            grad[[51, x, 0]] = 0.25; // down = 2.0
        }
        let cfg = GeometryConfig::default();
        let (grown_set, decisions) = expand_patches(
            &lone_patch(),
            &grad,
            &GroundTruth::empty(),
            96,
            96,
            &cfg,
        )
        .unwrap();
        assert_eq!(decisions.len(), 1);
        assert_eq!(decisions[0].direction, Some(GrowDirection::Right));
        assert_abs_diff_eq!(decisions[0].gain, 2.0, epsilon = 1e-9);
        let r = &grown_set.patches()[0].rect;
        assert_abs_diff_eq!(r.w, 4.0 + 1.92, epsilon = 1e-9);
        assert_abs_diff_eq!(r.h, 4.0, epsilon = 1e-9);
        let (x1, _, x2, _) = r.corners();
        assert_abs_diff_eq!(x1, 46.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x2, 51.92, epsilon = 1e-9);
    }

    #[test]
    fn border_patch_cannot_grow_outward() {
        // Patch flush with the left border: Left is blocked, and with a
        // uniform gradient the tie among the rest goes to Right.
        let patches = PatchSet::new(vec![Patch {
            group_id: 0,
            rect: BoxCwh::from_top_left(0.0, 40.0, 4.0, 4.0).unwrap(),
        }]);
        let grad = zero_grad(96, 96);
        let cfg = GeometryConfig::default();
        let (_, decisions) =
            expand_patches(&patches, &grad, &GroundTruth::empty(), 96, 96, &cfg).unwrap();
        assert_eq!(decisions[0].direction, Some(GrowDirection::Right));
    }

    #[test]
    fn fully_blocked_patch_stays_unchanged() {
        // The patch nearly fills the frame: every direction would cross
        // the border.
        let patches = PatchSet::new(vec![Patch {
            group_id: 0,
            rect: b(48.0, 48.0, 95.0, 95.0),
        }]);
        let grad = zero_grad(96, 96);
        let cfg = GeometryConfig::default();
        let (after, decisions) =
            expand_patches(&patches, &grad, &GroundTruth::empty(), 96, 96, &cfg).unwrap();
        assert_eq!(decisions[0].direction, None);
        assert_eq!(after.patches()[0].rect, b(48.0, 48.0, 95.0, 95.0));
    }

    #[test]
    fn expansion_never_overlaps_objects_or_siblings() {
        // An object flush against the patch's preferred direction and a
        // sibling patch below: both directions must be skipped.
        let gt = gt_of(vec![b(58.0, 48.0, 12.0, 12.0)]);
        let cfg = GeometryConfig {
            // Gap factor small enough that only true overlap blocks.
            min_dist_factor: 0.01,
            ..GeometryConfig::default()
        };
        let patches = PatchSet::new(vec![
            Patch { group_id: 0, rect: b(48.0, 48.0, 6.0, 6.0) },
            Patch { group_id: 0, rect: b(48.0, 53.5, 6.0, 5.0) },
        ]);
        let mut grad = zero_grad(96, 96);
        // Heavy mass to the right of patch 0 (inside the object) and
        // below it (inside the sibling).
        for y in 40..60 {
            for x in 52..70 {
                grad[[y, x, 0]] = 9.0;
            }
        }
        let (after, decisions) = expand_patches(&patches, &grad, &gt, 96, 96, &cfg).unwrap();
        after.validate(&gt, 96, 96).unwrap();
        // Patch 0 could not take Right (object) or Down (sibling).
        assert!(matches!(
            decisions[0].direction,
            Some(GrowDirection::Left) | Some(GrowDirection::Top)
        ));
    }

    #[test]
    fn growth_is_exactly_one_stride_and_never_shrinks() {
        let gt = gt_of(vec![b(20.0, 20.0, 16.0, 16.0)]);
        let cfg = GeometryConfig::default();
        let groups = cluster_objects(&gt, 96, 96, &cfg);
        let mut grad = zero_grad(96, 96);
        for y in 0..96 {
            for x in 0..96 {
                grad[[y, x, 2]] = (y as f64 * 0.3 + x as f64 * 0.7).sin().abs();
            }
        }
        let (mut patches, _) = init_patches(&groups, &gt, &grad, 96, 96, &cfg).unwrap();
        let stride = cfg.stride(96, 96);
        for _ in 0..5 {
            let before: Vec<BoxCwh> = patches.iter().map(|p| p.rect).collect();
            let (after, decisions) =
                expand_patches(&patches, &grad, &gt, 96, 96, &cfg).unwrap();
            for (i, d) in decisions.iter().enumerate() {
                let (old, new) = (&before[i], &after.patches()[i].rect);
                match d.direction {
                    Some(GrowDirection::Left) | Some(GrowDirection::Right) => {
                        assert_abs_diff_eq!(new.w, old.w + stride, epsilon = 1e-9);
                        assert_abs_diff_eq!(new.h, old.h, epsilon = 1e-9);
                    }
                    Some(_) => {
                        assert_abs_diff_eq!(new.h, old.h + stride, epsilon = 1e-9);
                        assert_abs_diff_eq!(new.w, old.w, epsilon = 1e-9);
                    }
                    None => assert_eq!(new, old),
                }
                assert!(new.area() >= old.area() - 1e-12);
            }
            after.validate(&gt, 96, 96).unwrap();
            patches = after;
        }
    }
}

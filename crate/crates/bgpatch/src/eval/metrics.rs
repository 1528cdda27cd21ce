//! Image-quality and detection-quality metrics.
//!
//! PSNR is measured only over a pixel mask, because the attacks here
//! perturb small background regions and a full-image average would hide
//! almost any distortion. Detection quality uses the PASCAL-style ranked
//! protocol: detections are matched greedily in descending score order,
//! each ground-truth box matches at most once, and per-class average
//! precision is the all-point area under the precision-recall curve
//! (recorded as `all-point` in report metadata since the 11-point variant
//! would give different numbers).
//!
//! Matching supports per-object ignore flags so ablations can score one
//! object subset: a detection whose best match is an ignored object is
//! dropped from the ranking instead of counting as a false positive, and
//! ignored objects do not count towards recall.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::boxes::{iou, BoxCwh, GroundTruth};
use crate::detector::{SsmOutputs, BACKGROUND_CLASS};
use crate::error::{BgError, Result};
use crate::image::ImageBuffer;
use crate::mask::PixelMask;

/// Peak signal value for PSNR (8-bit display convention).
pub const PSNR_PEAK: f64 = 255.0;

/// Peak signal-to-noise ratio in dB over the masked pixels of two images:
/// `10·log10(peak² / MSE)` with the mean squared error taken across all
/// three channels of every masked pixel. Identical masked content yields
/// `+∞`; an empty mask is an error because the quantity is undefined.
pub fn psnr(orig: &ImageBuffer, pert: &ImageBuffer, mask: &PixelMask) -> Result<f64> {
    if orig.height() != pert.height() || orig.width() != pert.width() {
        return Err(BgError::ShapeMismatch(format!(
            "psnr images differ: {}x{} vs {}x{}",
            orig.height(),
            orig.width(),
            pert.height(),
            pert.width()
        )));
    }
    if mask.height() != orig.height() || mask.width() != orig.width() {
        return Err(BgError::ShapeMismatch(format!(
            "psnr mask {}x{} does not fit image {}x{}",
            mask.height(),
            mask.width(),
            orig.height(),
            orig.width()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(BgError::EmptyMask);
    }
    let a = orig.pixels();
    let b = pert.pixels();
    let mut sq_sum = 0.0;
    for y in 0..orig.height() {
        for x in 0..orig.width() {
            if mask.get(y, x) {
                for c in 0..3 {
                    let d = a[[y, x, c]] - b[[y, x, c]];
                    sq_sum += d * d;
                }
            }
        }
    }
    let mse = sq_sum / (count * 3) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10())
}

/// One final detection after postprocessing: a single class, its score,
/// and the decoded box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDetection {
    /// Object class (never the background index).
    pub class: usize,
    /// Score of that class.
    pub score: f64,
    pub bbox: BoxCwh,
}

/// Score floor and NMS threshold applied to raw detector output.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// Candidates below this top-class score are dropped before NMS.
    ///
    /// The default sits above the score threshold used when selecting
    /// true positives during an attack — a candidate suppressed off the
    /// selection line is also gone from the evaluation — and above the
    /// per-class floor that label-smoothed training leaves on background
    /// candidates, so clean backgrounds stay quiet.
    pub score_floor: f64,
    /// Same-class boxes overlapping a kept box above this IoU are removed.
    pub nms_iou: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { score_floor: 0.2, nms_iou: 0.5 }
    }
}

/// Turns raw per-anchor output into a ranked detection list: keeps
/// candidates whose top class is an object class with score at or above
/// the floor, then applies greedy per-class non-maximum suppression.
/// The result is sorted by descending score (ties: class, then original
/// candidate order).
pub fn postprocess(out: &SsmOutputs, cfg: &PostprocessConfig) -> Vec<RankedDetection> {
    // (class, score, original index, box) for surviving candidates.
    let mut cands: Vec<(usize, f64, usize, BoxCwh)> = Vec::new();
    for (j, rec) in out.detections.iter().enumerate() {
        let class = rec.top_class();
        if class == BACKGROUND_CLASS {
            continue;
        }
        let score = rec.scores[class];
        if score < cfg.score_floor {
            continue;
        }
        cands.push((class, score, j, rec.bbox));
    }
    cands.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0.cmp(&b.0))
            .then(a.2.cmp(&b.2))
    });
    let mut kept: Vec<RankedDetection> = Vec::new();
    for (class, score, _, bbox) in cands {
        let suppressed = kept
            .iter()
            .any(|k| k.class == class && iou(&k.bbox, &bbox) > cfg.nms_iou);
        if !suppressed {
            kept.push(RankedDetection { class, score, bbox });
        }
    }
    kept
}

/// Per-class outcome of a ranked evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    /// Non-ignored ground-truth instances of this class.
    pub gt_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Result of [`mean_average_precision`]: per-class APs and their mean over
/// classes that have at least one (non-ignored) ground-truth instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub per_class: BTreeMap<usize, ClassAp>,
    pub map: f64,
}

/// Mean average precision at one IoU threshold over a set of images.
///
/// `dets[i]` are the detections of image `i`, matched only against
/// `gts[i]`. Classes that never appear in the ground truth are excluded
/// from the mean (their detections simply score nothing); a dataset with
/// no objects at all yields a mAP of 0.
pub fn mean_average_precision(
    dets: &[Vec<RankedDetection>],
    gts: &[GroundTruth],
    iou_thr: f64,
) -> Result<MapResult> {
    let ignore: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    mean_average_precision_filtered(dets, gts, iou_thr, &ignore)
}

/// [`mean_average_precision`] with per-object ignore flags (`ignore[i][g]`
/// hides object `g` of image `i` from both recall and false positives).
pub fn mean_average_precision_filtered(
    dets: &[Vec<RankedDetection>],
    gts: &[GroundTruth],
    iou_thr: f64,
    ignore: &[Vec<bool>],
) -> Result<MapResult> {
    if dets.len() != gts.len() || ignore.len() != gts.len() {
        return Err(BgError::ShapeMismatch(format!(
            "per-image lists disagree: {} detections, {} ground truths, {} ignore masks",
            dets.len(),
            gts.len(),
            ignore.len()
        )));
    }
    for (i, (gt, ig)) in gts.iter().zip(ignore).enumerate() {
        if gt.len() != ig.len() {
            return Err(BgError::ShapeMismatch(format!(
                "image {i}: {} objects but {} ignore flags",
                gt.len(),
                ig.len()
            )));
        }
    }
    if !(iou_thr > 0.0 && iou_thr < 1.0) {
        return Err(BgError::InvalidArgument(format!(
            "IoU threshold must be in (0, 1), got {iou_thr}"
        )));
    }

    // Classes with at least one scoreable ground-truth instance.
    let mut classes: Vec<usize> = Vec::new();
    for (gt, ig) in gts.iter().zip(ignore) {
        for (label, &ignored) in gt.labels.iter().zip(ig) {
            if !ignored && !classes.contains(label) {
                classes.push(*label);
            }
        }
    }
    classes.sort_unstable();

    let mut per_class = BTreeMap::new();
    let mut ap_sum = 0.0;
    for &class in &classes {
        let outcome = class_ap(dets, gts, ignore, class, iou_thr);
        ap_sum += outcome.ap;
        per_class.insert(class, outcome);
    }
    let map = if classes.is_empty() { 0.0 } else { ap_sum / classes.len() as f64 };
    Ok(MapResult { per_class, map })
}

/// Ranked evaluation of a single class across all images.
fn class_ap(
    dets: &[Vec<RankedDetection>],
    gts: &[GroundTruth],
    ignore: &[Vec<bool>],
    class: usize,
    iou_thr: f64,
) -> ClassAp {
    let gt_count: usize = gts
        .iter()
        .zip(ignore)
        .map(|(gt, ig)| {
            gt.labels
                .iter()
                .zip(ig)
                .filter(|(&l, &ignored)| l == class && !ignored)
                .count()
        })
        .sum();

    // Global ranking: score descending, ties by image then list position.
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (i, image_dets) in dets.iter().enumerate() {
        for (d, det) in image_dets.iter().enumerate() {
            if det.class == class {
                entries.push((i, d));
            }
        }
    }
    entries.sort_by(|a, b| {
        dets[b.0][b.1]
            .score
            .total_cmp(&dets[a.0][a.1].score)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_cum = Vec::with_capacity(entries.len());
    let mut fp_cum = Vec::with_capacity(entries.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(i, d) in &entries {
        let det = &dets[i][d];
        // Best-overlap object of the same class in the same image
        // (ties towards the lowest object index).
        let mut best: Option<(usize, f64)> = None;
        for (g, (bx, &label)) in gts[i].boxes.iter().zip(&gts[i].labels).enumerate() {
            if label != class {
                continue;
            }
            let v = iou(&det.bbox, bx);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= iou_thr => {
                if ignore[i][g] {
                    // Matches an object this evaluation is blind to.
                    continue;
                }
                if matched[i][g] {
                    fp += 1;
                } else {
                    matched[i][g] = true;
                    tp += 1;
                }
            }
            _ => fp += 1,
        }
        tp_cum.push(tp);
        fp_cum.push(fp);
    }

    let ap = if gt_count == 0 {
        0.0
    } else {
        area_under_pr(&tp_cum, &fp_cum, gt_count)
    };
    ClassAp { ap, gt_count, true_positives: tp, false_positives: fp }
}

/// All-point interpolated area under the precision-recall staircase built
/// from cumulative TP/FP counts: at each rank the precision envelope
/// (maximum precision at any higher recall) is integrated against the
/// recall increments.
fn area_under_pr(tp_cum: &[usize], fp_cum: &[usize], gt_count: usize) -> f64 {
    debug_assert!(gt_count > 0);
    let n = tp_cum.len();
    if n == 0 {
        return 0.0;
    }
    let precision: Vec<f64> = (0..n)
        .map(|k| tp_cum[k] as f64 / (tp_cum[k] + fp_cum[k]) as f64)
        .collect();
    let recall: Vec<f64> = (0..n).map(|k| tp_cum[k] as f64 / gt_count as f64).collect();
    // Envelope from the right: env[k] = max(precision[k..]).
    let mut env = precision;
    for k in (0..n - 1).rev() {
        if env[k + 1] > env[k] {
            env[k] = env[k + 1];
        }
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        let dr = recall[k] - prev_recall;
        if dr > 0.0 {
            area += dr * env[k];
            prev_recall = recall[k];
        }
    }
    area
}

/// Counts detections that sit on pure background: score at or above
/// `score_min` and IoU below `max_gt_iou` with every annotated object.
/// `class_filter` restricts the count to one class.
pub fn count_background_false_positives(
    dets: &[RankedDetection],
    gt: &GroundTruth,
    score_min: f64,
    max_gt_iou: f64,
    class_filter: Option<usize>,
) -> usize {
    dets.iter()
        .filter(|det| {
            if det.score < score_min {
                return false;
            }
            if let Some(c) = class_filter {
                if det.class != c {
                    return false;
                }
            }
            gt.boxes.iter().all(|b| iou(&det.bbox, b) < max_gt_iou)
        })
        .count()
}

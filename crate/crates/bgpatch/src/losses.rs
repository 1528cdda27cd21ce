//! The three attack losses and their detection-selection rules.
//!
//! - **TPC** (true-positive class): raise the runner-up class score of every
//!   detection that currently counts as a true positive, so its correct-class
//!   score collapses. `L_tpc = −Σ_j z_j · ln s_j[ĉ_j]`.
//! - **TPS** (true-positive shape): push predicted regression offsets away
//!   from the true offsets of the matched ground truth.
//!   `L_tps = exp(−Σ_j z_j · ‖Δ_j − Δ̄_j‖²)` — descending this loss grows the
//!   exponent, i.e. drags boxes off their objects.
//! - **FPC** (false-positive class): give background detections that overlap
//!   the patches a confident object class. `L_fpc = −Σ_j r_j · ln s_j[c′_j]`.
//!
//! A detection is a true positive (`z_j = 1`) when its decoded box overlaps
//! its matched ground truth with IoU > 0.5 **and** its correct-class score
//! exceeds 0.1. It is a false-positive candidate (`r_j = 1`) when it has
//! zero IoU with every ground-truth box **and** IoU above 0.1 with at least
//! one individual patch. The two conditions are mutually exclusive.
//!
//! Selections are recomputed from every forward pass (nothing is frozen
//! across iterations), with deterministic lowest-index tie-breaking, and the
//! losses treat them as constants: gradients flow only through the smooth
//! score/offset terms.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, GroundTruth};
use crate::detector::{encode_offsets, LossWeights, SsmOutputs, BACKGROUND_CLASS};
use crate::error::{BgError, Result};
use crate::patches::PatchSet;

/// IoU a detection must exceed with its matched ground truth to be a true
/// positive.
pub const TP_IOU_THRESHOLD: f64 = 0.5;
/// Correct-class score a detection must exceed to be a true positive.
pub const TP_SCORE_THRESHOLD: f64 = 0.1;
/// IoU with a patch a background detection must exceed to be selected for
/// false-positive injection.
pub const FP_PATCH_IOU_THRESHOLD: f64 = 0.1;
/// "Zero IoU with every ground-truth box", with float noise absorbed.
pub const ZERO_IOU_EPS: f64 = 1e-9;
/// Softmax scores are clamped here before the log so saturated scores keep
/// the loss (and its gradient) finite.
pub const LOG_CLAMP: f64 = 1e-12;

/// True-positive selection: which detections the TPC/TPS terms act on.
///
/// All vectors have length `M`. `correct_class` and `runner_up` are `Some`
/// exactly where `z` is set; `matched_gt` is `Some` wherever the detection
/// overlaps any ground truth at all (the argmax-IoU match, lowest index on
/// ties).
#[derive(Debug, Clone, PartialEq)]
pub struct TpSelection {
    pub z: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    pub correct_class: Vec<Option<usize>>,
    pub runner_up: Vec<Option<usize>>,
}

impl TpSelection {
    pub fn active_count(&self) -> usize {
        self.z.iter().filter(|&&v| v).count()
    }
}

/// False-positive selection: which background detections the FPC term acts
/// on, and the class each one is pushed toward.
#[derive(Debug, Clone, PartialEq)]
pub struct FpSelection {
    pub r: Vec<bool>,
    pub fp_class: Vec<Option<usize>>,
}

impl FpSelection {
    pub fn active_count(&self) -> usize {
        self.r.iter().filter(|&&v| v).count()
    }
}

/// Loss values from one evaluation. Term fields carry their configured
/// weights already applied (unit by default), so `total` is always the sum
/// of the enabled fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tpc: f64,
    pub tps: f64,
    pub fpc: f64,
    pub total: f64,
    pub active_tp_count: usize,
    pub active_fp_count: usize,
}

/// Selects true positives: every detection is matched to its argmax-IoU
/// ground-truth box (ties → lowest GT index), and `z_j` is set when the
/// match IoU exceeds [`TP_IOU_THRESHOLD`] and the correct-class score
/// exceeds [`TP_SCORE_THRESHOLD`]. The runner-up class `ĉ_j` is the
/// highest-scoring class other than the correct one — background included,
/// so for a one-class RPN it is always background.
pub fn select_true_positives(out: &SsmOutputs, gt: &GroundTruth) -> TpSelection {
    let m = out.len();
    let mut sel = TpSelection {
        z: vec![false; m],
        matched_gt: vec![None; m],
        correct_class: vec![None; m],
        runner_up: vec![None; m],
    };
    if gt.is_empty() {
        return sel;
    }
    for (j, det) in out.detections.iter().enumerate() {
        let mut best_i = 0usize;
        let mut best_iou = f64::NEG_INFINITY;
        for (i, gbox) in gt.boxes.iter().enumerate() {
            let v = iou(&det.bbox, gbox);
            if v > best_iou {
                best_iou = v;
                best_i = i;
            }
        }
        if best_iou > 0.0 {
            sel.matched_gt[j] = Some(best_i);
        }
        if best_iou > TP_IOU_THRESHOLD {
            let c = gt.labels[best_i];
            if det.scores[c] > TP_SCORE_THRESHOLD {
                sel.z[j] = true;
                sel.correct_class[j] = Some(c);
                sel.runner_up[j] = Some(argmax_excluding(&det.scores, c));
            }
        }
    }
    sel
}

/// Highest-scoring class index skipping `excluded` (ties → lowest index).
fn argmax_excluding(scores: &[f64], excluded: usize) -> usize {
    let mut best: Option<usize> = None;
    for (k, &s) in scores.iter().enumerate() {
        if k == excluded {
            continue;
        }
        match best {
            None => best = Some(k),
            Some(b) if s > scores[b] => best = Some(k),
            _ => {}
        }
    }
    best.expect("score vector has at least two entries")
}

/// Highest-scoring *object* class (background excluded, ties → lowest).
fn argmax_object_class(scores: &[f64]) -> usize {
    let mut best = 1usize;
    for (k, &s) in scores.iter().enumerate().skip(2) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

/// `L_tpc`: summed cross-entropy of the runner-up class over selected true
/// positives. Zero when nothing is selected.
pub fn tpc_loss(out: &SsmOutputs, sel: &TpSelection) -> f64 {
    let mut loss = 0.0;
    for (j, det) in out.detections.iter().enumerate() {
        if sel.z[j] {
            let c_hat = sel.runner_up[j].expect("runner_up set where z is set");
            loss -= det.scores[c_hat].max(LOG_CLAMP).ln();
        }
    }
    loss
}

/// `L_tps = exp(−S)` where `S` sums squared offset differences (predicted
/// vs. true, all four components) over selected true positives. Equals 1
/// when nothing is selected (constant, zero gradient).
pub fn tps_loss(out: &SsmOutputs, sel: &TpSelection, gt: &GroundTruth) -> f64 {
    (-tps_exponent(out, sel, gt)).exp()
}

/// The exponent `S ≥ 0` of the TPS loss.
fn tps_exponent(out: &SsmOutputs, sel: &TpSelection, gt: &GroundTruth) -> f64 {
    let mut s = 0.0;
    for (j, det) in out.detections.iter().enumerate() {
        if sel.z[j] {
            let gi = sel.matched_gt[j].expect("matched where z is set");
            let true_off = encode_offsets(&det.anchor, &gt.boxes[gi]);
            for k in 0..4 {
                let d = det.pred_offsets[k] - true_off[k];
                s += d * d;
            }
        }
    }
    s
}

/// Selects false-positive candidates: detections with zero IoU
/// (< [`ZERO_IOU_EPS`]) against every ground-truth box and IoU above
/// [`FP_PATCH_IOU_THRESHOLD`] with at least one individual patch. The
/// injected class is `target` when given (validated against `1..=C`),
/// otherwise the highest-scoring object class per detection.
pub fn select_false_positives(
    out: &SsmOutputs,
    gt: &GroundTruth,
    patches: &PatchSet,
    target: Option<usize>,
    num_object_classes: usize,
) -> Result<FpSelection> {
    if let Some(t) = target {
        if t == BACKGROUND_CLASS || t > num_object_classes {
            return Err(BgError::InvalidArgument(format!(
                "target class {t} outside 1..={num_object_classes}"
            )));
        }
    }
    let m = out.len();
    let mut sel = FpSelection {
        r: vec![false; m],
        fp_class: vec![None; m],
    };
    if patches.is_empty() {
        return Ok(sel);
    }
    for (j, det) in out.detections.iter().enumerate() {
        let overlaps_gt = gt.boxes.iter().any(|g| iou(&det.bbox, g) >= ZERO_IOU_EPS);
        if overlaps_gt {
            continue;
        }
        let patch_iou = patches
            .iter()
            .map(|p| iou(&det.bbox, &p.rect))
            .fold(0.0f64, f64::max);
        if patch_iou > FP_PATCH_IOU_THRESHOLD {
            sel.r[j] = true;
            sel.fp_class[j] = Some(match target {
                Some(t) => t,
                None => argmax_object_class(&det.scores),
            });
        }
    }
    Ok(sel)
}

/// `L_fpc`: summed cross-entropy of the injected class over selected
/// false-positive candidates. Zero when nothing is selected.
pub fn fpc_loss(out: &SsmOutputs, sel: &FpSelection) -> f64 {
    let mut loss = 0.0;
    for (j, det) in out.detections.iter().enumerate() {
        if sel.r[j] {
            let c = sel.fp_class[j].expect("fp_class set where r is set");
            loss -= det.scores[c].max(LOG_CLAMP).ln();
        }
    }
    loss
}

/// Evaluates the enabled losses and assembles the breakdown.
///
/// Selections are computed here, from these outputs. A disabled term's
/// field is always 0, so `total` is exactly the sum of the three fields;
/// an *enabled* TPS term with an empty selection reports its no-selection
/// value 1.
pub fn total_loss(
    out: &SsmOutputs,
    gt: &GroundTruth,
    patches: &PatchSet,
    weights: &LossWeights,
    num_object_classes: usize,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let tp_sel = if weights.use_tpc || weights.use_tps {
        Some(select_true_positives(out, gt))
    } else {
        None
    };
    let fp_sel = if weights.use_fpc {
        Some(select_false_positives(
            out,
            gt,
            patches,
            weights.target_class,
            num_object_classes,
        )?)
    } else {
        None
    };

    let mut breakdown = LossBreakdown {
        tpc: 0.0,
        tps: 0.0,
        fpc: 0.0,
        total: 0.0,
        active_tp_count: tp_sel.as_ref().map_or(0, TpSelection::active_count),
        active_fp_count: fp_sel.as_ref().map_or(0, FpSelection::active_count),
    };
    if weights.use_tpc {
        breakdown.tpc = weights.tpc_weight * tpc_loss(out, tp_sel.as_ref().unwrap());
    }
    if weights.use_tps {
        breakdown.tps = weights.tps_weight * tps_loss(out, tp_sel.as_ref().unwrap(), gt);
    }
    if weights.use_fpc {
        breakdown.fpc = weights.fpc_weight * fpc_loss(out, fp_sel.as_ref().unwrap());
    }
    breakdown.total = breakdown.tpc + breakdown.tps + breakdown.fpc;
    Ok(breakdown)
}

/// Gradients of the enabled loss sum with respect to each detection's
/// scores and offsets — the piece a detector backpropagates through its
/// network. Selections are recomputed here and treated as constants.
#[derive(Debug, Clone)]
pub struct OutputGradients {
    /// `d total / d scores`, shape `M × (C+1)` as nested vecs.
    pub d_scores: Vec<Vec<f64>>,
    /// `d total / d pred_offsets`, shape `M × 4`.
    pub d_offsets: Vec<[f64; 4]>,
}

/// Evaluates the enabled losses *and* their output-space gradients in one
/// pass. Returns the breakdown alongside the gradients; callers decide what
/// zero active selections mean (see
/// [`SingleShotDetector::input_gradient`](crate::detector::SingleShotDetector::input_gradient)).
pub fn loss_output_gradients(
    out: &SsmOutputs,
    gt: &GroundTruth,
    patches: &PatchSet,
    weights: &LossWeights,
    num_object_classes: usize,
) -> Result<(LossBreakdown, OutputGradients)> {
    weights.validate()?;
    let m = out.len();
    let num_scores = num_object_classes + 1;
    let mut grads = OutputGradients {
        d_scores: vec![vec![0.0; num_scores]; m],
        d_offsets: vec![[0.0; 4]; m],
    };

    let tp_sel = if weights.use_tpc || weights.use_tps {
        Some(select_true_positives(out, gt))
    } else {
        None
    };
    let fp_sel = if weights.use_fpc {
        Some(select_false_positives(
            out,
            gt,
            patches,
            weights.target_class,
            num_object_classes,
        )?)
    } else {
        None
    };

    let mut breakdown = LossBreakdown {
        tpc: 0.0,
        tps: 0.0,
        fpc: 0.0,
        total: 0.0,
        active_tp_count: tp_sel.as_ref().map_or(0, TpSelection::active_count),
        active_fp_count: fp_sel.as_ref().map_or(0, FpSelection::active_count),
    };

    if weights.use_tpc {
        let sel = tp_sel.as_ref().unwrap();
        breakdown.tpc = weights.tpc_weight * tpc_loss(out, sel);
        for (j, det) in out.detections.iter().enumerate() {
            if sel.z[j] {
                let c_hat = sel.runner_up[j].unwrap();
                let s = det.scores[c_hat];
                // d(−ln max(s, ε))/ds is −1/s above the clamp and 0 below
                // it (the clamped branch is constant).
                if s > LOG_CLAMP {
                    grads.d_scores[j][c_hat] += weights.tpc_weight * (-1.0 / s);
                }
            }
        }
    }
    if weights.use_tps {
        let sel = tp_sel.as_ref().unwrap();
        let s_exp = tps_exponent(out, sel, gt);
        let value = (-s_exp).exp();
        breakdown.tps = weights.tps_weight * value;
        // d exp(−S)/dΔ_k = −exp(−S) · 2(Δ_k − Δ̄_k)
        for (j, det) in out.detections.iter().enumerate() {
            if sel.z[j] {
                let gi = sel.matched_gt[j].unwrap();
                let true_off = encode_offsets(&det.anchor, &gt.boxes[gi]);
                for k in 0..4 {
                    let d = det.pred_offsets[k] - true_off[k];
                    grads.d_offsets[j][k] += weights.tps_weight * (-value * 2.0 * d);
                }
            }
        }
    }
    if weights.use_fpc {
        let sel = fp_sel.as_ref().unwrap();
        breakdown.fpc = weights.fpc_weight * fpc_loss(out, sel);
        for (j, det) in out.detections.iter().enumerate() {
            if sel.r[j] {
                let c = sel.fp_class[j].unwrap();
                let s = det.scores[c];
                if s > LOG_CLAMP {
                    grads.d_scores[j][c] += weights.fpc_weight * (-1.0 / s);
                }
            }
        }
    }
    breakdown.total = breakdown.tpc + breakdown.tps + breakdown.fpc;
    Ok((breakdown, grads))
}

/// True when no enabled term has an active selection, i.e. the loss surface
/// is flat and [`BgError::NoActiveLoss`] is the right signal.
pub fn no_active_loss(weights: &LossWeights, breakdown: &LossBreakdown) -> bool {
    let tp_active = (weights.use_tpc || weights.use_tps) && breakdown.active_tp_count > 0;
    let fp_active = weights.use_fpc && breakdown.active_fp_count > 0;
    !(tp_active || fp_active)
}

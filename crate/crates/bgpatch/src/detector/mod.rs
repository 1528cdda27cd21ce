//! The boundary to a Single Shot Module: one forward pass yielding every
//! detection with its anchor, offsets, and post-softmax scores, plus an
//! analytic input-gradient query for the attack losses.
//!
//! A "single-shot module" here is any fully convolutional detection head
//! that emits all of its candidates in one pass — the region-proposal stage
//! of a two-stage detector (one foreground class, `C = 1`) or a single-stage
//! detector itself (`C` object classes). Real detectors plug in by
//! implementing [`SingleShotDetector`]; the bundled [`toy`] detector keeps
//! the whole suite runnable at desk scale.

pub mod toy;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::boxes::{BoxCwh, GroundTruth};
use crate::error::{BgError, Result};
use crate::losses::LossBreakdown;
use crate::patches::PatchSet;

/// Class index reserved for background in every score vector.
pub const BACKGROUND_CLASS: usize = 0;

/// Whether the attacked module is a proposal stage or a full single-stage
/// detector. Drives the default PSNR floor and the one-class constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    /// Region-proposal stage of a two-stage detector: a single "object"
    /// class, so `num_object_classes` must be 1.
    TwoStageRpn,
    /// A single-stage detector scoring `C` object classes directly.
    SingleStage,
}

/// Static facts about a detector instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorMetadata {
    /// Number of object classes `C` (background excluded), `C >= 1`.
    pub num_object_classes: usize,
    pub stage_kind: StageKind,
    pub input_height: usize,
    pub input_width: usize,
}

impl DetectorMetadata {
    pub fn new(
        num_object_classes: usize,
        stage_kind: StageKind,
        input_height: usize,
        input_width: usize,
    ) -> Result<Self> {
        if num_object_classes < 1 {
            return Err(BgError::InvalidArgument(
                "a detector needs at least one object class".into(),
            ));
        }
        if stage_kind == StageKind::TwoStageRpn && num_object_classes != 1 {
            return Err(BgError::InvalidArgument(format!(
                "a two-stage RPN scores exactly one object class, got C={num_object_classes}"
            )));
        }
        Ok(Self {
            num_object_classes,
            stage_kind,
            input_height,
            input_width,
        })
    }

    /// Length of each score vector: `C` object classes plus background.
    pub fn num_scores(&self) -> usize {
        self.num_object_classes + 1
    }
}

/// One detection: post-softmax scores over `C + 1` classes, the anchor it
/// was predicted from, the raw regression offsets, and the decoded box.
///
/// Invariants: scores are nonnegative and sum to 1 (±1e-6), and
/// `bbox == decode_offsets(anchor, pred_offsets)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub scores: Vec<f64>,
    pub anchor: BoxCwh,
    pub pred_offsets: [f64; 4],
    pub bbox: BoxCwh,
}

impl DetectionRecord {
    /// Builds a record, decoding the box from anchor + offsets so the
    /// box/offset invariant holds by construction.
    pub fn from_prediction(scores: Vec<f64>, anchor: BoxCwh, pred_offsets: [f64; 4]) -> Self {
        let bbox = decode_offsets(&anchor, pred_offsets);
        Self {
            scores,
            anchor,
            pred_offsets,
            bbox,
        }
    }

    /// Index of the highest-scoring class (ties → lowest index).
    pub fn top_class(&self) -> usize {
        let mut best = 0;
        for (k, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = k;
            }
        }
        best
    }
}

/// Everything one forward pass produces. The detection count `M` is fixed
/// for a given detector and input size.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmOutputs {
    pub detections: Vec<DetectionRecord>,
    pub source_image_id: Option<i64>,
}

impl SsmOutputs {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Which loss terms the attack optimizes, with optional per-term weights.
///
/// The three terms are summed with unit weights by default; the weight
/// fields exist for experimentation and scale both the loss value and its
/// gradient. `target_class` switches false-positive injection from
/// "highest-scoring object class" to a fixed class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub use_tpc: bool,
    pub use_tps: bool,
    pub use_fpc: bool,
    pub target_class: Option<usize>,
    pub tpc_weight: f64,
    pub tps_weight: f64,
    pub fpc_weight: f64,
}

impl Default for LossWeights {
    /// All three terms enabled at unit weight, untargeted.
    fn default() -> Self {
        Self {
            use_tpc: true,
            use_tps: true,
            use_fpc: true,
            target_class: None,
            tpc_weight: 1.0,
            tps_weight: 1.0,
            fpc_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn tpc_only() -> Self {
        Self {
            use_tps: false,
            use_fpc: false,
            ..Self::default()
        }
    }

    pub fn tps_only() -> Self {
        Self {
            use_tpc: false,
            use_fpc: false,
            ..Self::default()
        }
    }

    pub fn fpc_only() -> Self {
        Self {
            use_tpc: false,
            use_tps: false,
            ..Self::default()
        }
    }

    pub fn tpc_tps() -> Self {
        Self {
            use_fpc: false,
            ..Self::default()
        }
    }

    /// False-positive injection forced to `class` (FPC enabled).
    pub fn targeted(class: usize) -> Self {
        Self {
            target_class: Some(class),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.use_tpc || self.use_tps || self.use_fpc) {
            return Err(BgError::InvalidArgument(
                "at least one loss term must be enabled".into(),
            ));
        }
        if self.tpc_weight < 0.0 || self.tps_weight < 0.0 || self.fpc_weight < 0.0 {
            return Err(BgError::InvalidArgument("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Analytic gradient of the enabled losses with respect to the input image,
/// together with the loss values it was computed from (handy for tracing
/// without a second forward pass).
#[derive(Debug, Clone)]
pub struct InputGradient {
    /// `(H, W, 3)` — same layout as the image pixels.
    pub grad: Array3<f64>,
    pub breakdown: LossBreakdown,
}

/// The detector adapter contract.
///
/// Implementations must be deterministic: `forward` is a pure function of
/// (weights, image) and repeated calls return byte-identical outputs.
/// Instances support concurrent read-only `forward`/`input_gradient` calls;
/// weights are never mutated during an attack.
pub trait SingleShotDetector: Send + Sync {
    fn metadata(&self) -> &DetectorMetadata;

    /// One forward pass over the full image.
    fn forward(&self, img: &crate::image::ImageBuffer) -> Result<SsmOutputs>;

    /// Gradient of the enabled loss sum with respect to every input pixel.
    ///
    /// The gradient covers the full image; masking to the patch region is
    /// the caller's job. When every enabled term has an empty selection
    /// (no gradient is defined anywhere) this returns
    /// [`BgError::NoActiveLoss`] and the caller decides what that means —
    /// the attack loop treats it as "nothing left to attack".
    fn input_gradient(
        &self,
        img: &crate::image::ImageBuffer,
        gt: &GroundTruth,
        patches: &PatchSet,
        weights: &LossWeights,
    ) -> Result<InputGradient>;
}

/// Encodes the offset a regressor must predict to warp `anchor` onto
/// `target`: translation normalized by anchor size, log size ratios.
///
/// `(Δx, Δy, Δw, Δh) = ((x−x_a)/w_a, (y−y_a)/h_a, ln(w/w_a), ln(h/h_a))`.
/// Box sides are strictly positive by the type invariant, so the formula is
/// total on valid boxes.
#[inline]
pub fn encode_offsets(anchor: &BoxCwh, target: &BoxCwh) -> [f64; 4] {
    debug_assert!(anchor.w > 0.0 && anchor.h > 0.0 && target.w > 0.0 && target.h > 0.0);
    [
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        (target.w / anchor.w).ln(),
        (target.h / anchor.h).ln(),
    ]
}

/// Exact inverse of [`encode_offsets`]; the exponential keeps decoded sides
/// positive for any finite offsets.
#[inline]
pub fn decode_offsets(anchor: &BoxCwh, offsets: [f64; 4]) -> BoxCwh {
    debug_assert!(anchor.w > 0.0 && anchor.h > 0.0);
    BoxCwh {
        cx: anchor.cx + offsets[0] * anchor.w,
        cy: anchor.cy + offsets[1] * anchor.h,
        w: anchor.w * offsets[2].exp(),
        h: anchor.h * offsets[3].exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxCwh {
        BoxCwh::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn metadata_enforces_rpn_single_class() {
        assert!(DetectorMetadata::new(3, StageKind::SingleStage, 96, 96).is_ok());
        assert!(DetectorMetadata::new(1, StageKind::TwoStageRpn, 96, 96).is_ok());
        assert!(DetectorMetadata::new(3, StageKind::TwoStageRpn, 96, 96).is_err());
        assert!(DetectorMetadata::new(0, StageKind::SingleStage, 96, 96).is_err());
    }

    #[test]
    fn encode_identity_when_anchor_equals_target() {
        let a = b(10.0, 20.0, 8.0, 6.0);
        assert_eq!(encode_offsets(&a, &a), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_matches_hand_computed_offsets() {
        let anchor = b(10.0, 10.0, 10.0, 10.0);
        let gt = b(15.0, 10.0, 20.0, 10.0);
        let off = encode_offsets(&anchor, &gt);
        assert_abs_diff_eq!(off[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(off[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(off[2], std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(off[3], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn decode_inverts_the_encode_example() {
        let anchor = b(10.0, 10.0, 10.0, 10.0);
        let decoded = decode_offsets(&anchor, [0.5, 0.0, std::f64::consts::LN_2, 0.0]);
        assert_abs_diff_eq!(decoded.cx, 15.0, epsilon = 1e-9);
        assert_abs_diff_eq!(decoded.cy, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(decoded.w, 20.0, epsilon = 1e-9);
        assert_abs_diff_eq!(decoded.h, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_offsets_decode_to_anchor() {
        let anchor = b(3.0, 4.0, 5.0, 6.0);
        assert_eq!(decode_offsets(&anchor, [0.0; 4]), anchor);
    }

    #[test]
    fn detection_record_box_matches_decoded_offsets() {
        let anchor = b(12.0, 12.0, 16.0, 16.0);
        let rec = DetectionRecord::from_prediction(vec![0.25; 4], anchor, [0.1, -0.2, 0.05, 0.3]);
        assert_eq!(rec.bbox, decode_offsets(&rec.anchor, rec.pred_offsets));
    }

    #[test]
    fn top_class_breaks_ties_toward_lowest_index() {
        let rec = DetectionRecord::from_prediction(
            vec![0.3, 0.3, 0.3, 0.1],
            b(0.0, 0.0, 1.0, 1.0),
            [0.0; 4],
        );
        assert_eq!(rec.top_class(), 0);
    }

    #[test]
    fn loss_weights_require_an_enabled_term() {
        let none = LossWeights {
            use_tpc: false,
            use_tps: false,
            use_fpc: false,
            ..LossWeights::default()
        };
        assert!(none.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    proptest! {
        // 1000 random anchor/box pairs: decode(encode(..)) == identity to 1e-9.
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn encode_decode_round_trip(
            acx in -100.0..100.0f64, acy in -100.0..100.0f64,
            aw in 0.5..60.0f64, ah in 0.5..60.0f64,
            gcx in -100.0..100.0f64, gcy in -100.0..100.0f64,
            gw in 0.5..60.0f64, gh in 0.5..60.0f64,
        ) {
            let anchor = b(acx, acy, aw, ah);
            let gt = b(gcx, gcy, gw, gh);
            let back = decode_offsets(&anchor, encode_offsets(&anchor, &gt));
            prop_assert!((back.cx - gt.cx).abs() < 1e-9);
            prop_assert!((back.cy - gt.cy).abs() < 1e-9);
            prop_assert!((back.w - gt.w).abs() < 1e-9);
            prop_assert!((back.h - gt.h).abs() < 1e-9);
        }
    }
}

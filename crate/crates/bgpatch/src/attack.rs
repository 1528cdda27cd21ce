//! The attack loop: iterate detector gradient → patch geometry → normalized
//! masked update → clip, under a PSNR budget.
//!
//! Each iteration takes the loss gradient with respect to the input image,
//! lets the patch geometry grow towards the gradient mass, zeroes the
//! gradient outside the patch mask, rescales what remains to a fixed L2
//! length `lambda`, and subtracts it from the image (clipped to valid pixel
//! range). The run stops when the iteration budget empties, when no true
//! positives are left to suppress, or when the perturbation would push the
//! masked PSNR below the floor — in which case the offending update is
//! rolled back and the previous image is returned, so the returned image
//! always satisfies the PSNR constraint.
//!
//! Everything here is deterministic: the loop itself draws no randomness,
//! and [`random_baseline`] (the noise control matched to an attack's
//! distortion level) is seeded explicitly.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxes::{BoxCwh, GroundTruth};
use crate::detector::{LossWeights, SingleShotDetector, StageKind};
use crate::error::{BgError, Result};
use crate::eval::metrics::{postprocess, psnr, PostprocessConfig};
use crate::geometry::{cluster_objects, expand_patches, init_patches, GeometryConfig, InitShortfall};
use crate::image::{masked_update, ImageBuffer};
use crate::losses::LossBreakdown;
use crate::mask::rasterize;
use crate::patches::PatchSet;

/// Gradient L2 norms under the mask below this value skip the update.
const ZERO_NORM_EPS: f64 = 1e-12;

/// Relative size of the nominal object synthesized at the image center
/// when a false-positive-only attack runs on an image with no objects:
/// patch placement needs something to size and stand beside.
const PSEUDO_OBJECT_SCALE: f64 = 0.3;

/// Attack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L2 length of every accepted update (before pixel clipping).
    pub lambda: f64,
    /// Iteration budget.
    pub max_iter: usize,
    /// Masked-PSNR floor in dB; updates that would cross it are rolled back.
    pub psnr_floor: f64,
    pub geometry: GeometryConfig,
    pub loss_weights: LossWeights,
    /// Ignore the supplied ground truth and rebuild it from the clean
    /// forward pass, keeping detections scoring at least
    /// `pseudo_gt_score_floor`.
    pub pseudo_gt: bool,
    pub pseudo_gt_score_floor: f64,
    /// Recorded for provenance and used by seeded companions (the noise
    /// baseline); the optimization itself is deterministic.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lambda: 30.0,
            max_iter: 250,
            psnr_floor: 30.0,
            geometry: GeometryConfig::default(),
            loss_weights: LossWeights::default(),
            pseudo_gt: false,
            pseudo_gt_score_floor: 0.5,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Default config with the PSNR floor matched to the detector family:
    /// 35 dB when attacking a region-proposal stage, 30 dB otherwise.
    pub fn for_stage(stage: StageKind) -> Self {
        Self {
            psnr_floor: match stage {
                StageKind::TwoStageRpn => 35.0,
                StageKind::SingleStage => 30.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(BgError::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.max_iter == 0 {
            return Err(BgError::Config("max_iter must be >= 1".into()));
        }
        if !(self.psnr_floor.is_finite() && self.psnr_floor > 0.0) {
            return Err(BgError::Config(format!(
                "psnr_floor must be positive, got {}",
                self.psnr_floor
            )));
        }
        if !(self.pseudo_gt_score_floor.is_finite()
            && self.pseudo_gt_score_floor > 0.0
            && self.pseudo_gt_score_floor <= 1.0)
        {
            return Err(BgError::Config(format!(
                "pseudo_gt_score_floor must be in (0, 1], got {}",
                self.pseudo_gt_score_floor
            )));
        }
        self.geometry.validate()?;
        self.loss_weights.validate()
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// The iteration budget emptied. Reported even if the final update
    /// also happened to remove the last true positive.
    MaxIter,
    /// No active true positives remained at the top of an iteration (only
    /// checked when a true-positive loss is enabled).
    NoTruePositives,
    /// The next update would have pushed masked PSNR below the floor and
    /// was rolled back.
    PsnrFloor,
}

/// What happened to the pixel update of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOutcome {
    Applied,
    /// The masked gradient had (numerically) zero norm; geometry still
    /// advanced and the iteration still counted against the budget.
    SkippedZeroGradient,
    /// Applying the update would have violated the PSNR floor; the image
    /// reverted to the previous iterate.
    RejectedPsnrFloor,
}

/// One line of the attack trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    /// Masked PSNR of the image state this iteration evaluated: the new
    /// iterate when applied, the unchanged iterate when skipped, and the
    /// violating candidate when rejected. Infinite when the masked pixels
    /// are untouched (serialized as `null` in JSON).
    pub psnr: f64,
    /// Total real-valued patch area after this iteration's geometry step.
    pub patch_area: f64,
    pub patch_count: usize,
    pub outcome: UpdateOutcome,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial_image: ImageBuffer,
    pub patches: PatchSet,
    /// Completed loop iterations; equals `trace.len()`.
    pub iterations_run: usize,
    /// Masked PSNR of the returned image over the final patch mask;
    /// infinite when no pixel was changed.
    pub final_psnr: f64,
    pub termination: Termination,
    pub trace: Vec<IterationRecord>,
    /// Groups that received fewer than the configured number of patches.
    pub init_shortfalls: Vec<InitShortfall>,
}

/// Runs the attack on one image.
///
/// With `pseudo_gt` enabled the supplied ground truth is ignored and
/// rebuilt from the clean forward pass (score floor + non-maximum
/// suppression), mirroring an attacker without annotations. An empty
/// ground truth is an error when a true-positive loss is enabled; with
/// only false-positive injection active, patch placement falls back to a
/// nominal object at the image center and the loop proceeds.
pub fn run_attack(
    img: &ImageBuffer,
    gt: &GroundTruth,
    detector: &dyn SingleShotDetector,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let (height, width) = (img.height(), img.width());
    let weights = &cfg.loss_weights;
    let tp_driven = weights.use_tpc || weights.use_tps;

    // The ground truth the losses see.
    let work_gt = if cfg.pseudo_gt {
        pseudo_ground_truth(img, detector, cfg.pseudo_gt_score_floor)?
    } else {
        gt.clone()
    };
    if work_gt.is_empty() && tp_driven {
        return Err(BgError::InvalidArgument(
            "no objects to suppress: the ground truth is empty and a \
             true-positive loss is enabled (only false-positive injection \
             works without objects)"
            .into(),
        ));
    }
    // The ground truth the geometry sees: identical, except that a
    // false-positive-only run on an empty scene places patches around a
    // synthesized nominal object.
    let geom_gt = if work_gt.is_empty() {
        pseudo_geometry_object(height, width)?
    } else {
        work_gt.clone()
    };
    let groups = cluster_objects(&geom_gt, height, width, &cfg.geometry);

    let mut current = img.clone();
    let mut patches = PatchSet::empty();
    let mut init_shortfalls = Vec::new();
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut termination = Termination::MaxIter;

    for t in 0..cfg.max_iter {
        // Patches only exist after initialization, so the first gradient
        // cannot include the false-positive term.
        let mut iter_weights = weights.clone();
        if t == 0 {
            iter_weights.use_fpc = false;
        }

        let (loss, grad) = if iter_weights.use_tpc || iter_weights.use_tps || iter_weights.use_fpc
        {
            match detector.input_gradient(&current, &work_gt, &patches, &iter_weights) {
                Ok(ig) => {
                    if tp_driven && ig.breakdown.active_tp_count == 0 {
                        termination = Termination::NoTruePositives;
                        break;
                    }
                    (ig.breakdown, ig.grad)
                }
                Err(BgError::NoActiveLoss) if tp_driven => {
                    termination = Termination::NoTruePositives;
                    break;
                }
                // False-positive-only run whose patches currently catch no
                // candidate boxes: nothing to differentiate this iteration.
                Err(BgError::NoActiveLoss) => (zero_breakdown(), zero_grad(height, width)),
                Err(e) => return Err(e),
            }
        } else {
            // First iteration of a false-positive-only attack: placement
            // runs on a zero gradient, the update is skipped.
            (zero_breakdown(), zero_grad(height, width))
        };

        if t == 0 {
            let (initial, shortfalls) =
                init_patches(&groups, &geom_gt, &grad, height, width, &cfg.geometry)?;
            if initial.is_empty() {
                return Err(BgError::InvalidArgument(
                    "no feasible patch position on this image under the \
                     configured geometry"
                        .into(),
                ));
            }
            patches = initial;
            init_shortfalls = shortfalls;
        } else {
            let (expanded, _decisions) =
                expand_patches(&patches, &grad, &geom_gt, height, width, &cfg.geometry)?;
            patches = expanded;
        }
        patches.validate(&geom_gt, height, width)?;
        let mask = rasterize(&patches, height, width)?;

        // Mask the gradient and rescale it to length lambda.
        let mut masked = zero_grad(height, width);
        let mut norm_sq = 0.0;
        for y in 0..height {
            for x in 0..width {
                if mask.get(y, x) {
                    for c in 0..3 {
                        let g = grad[[y, x, c]];
                        masked[[y, x, c]] = g;
                        norm_sq += g * g;
                    }
                }
            }
        }
        let norm = norm_sq.sqrt();
        if norm < ZERO_NORM_EPS {
            trace.push(IterationRecord {
                iteration: t,
                loss,
                psnr: psnr_or_infinite(img, &current, &mask),
                patch_area: patches.total_area(),
                patch_count: patches.len(),
                outcome: UpdateOutcome::SkippedZeroGradient,
            });
            continue;
        }
        masked.mapv_inplace(|g| g * (cfg.lambda / norm));
        let candidate = masked_update(&current, &masked, &mask)?;
        let candidate_psnr = psnr(img, &candidate, &mask)?;

        if candidate_psnr < cfg.psnr_floor {
            trace.push(IterationRecord {
                iteration: t,
                loss,
                psnr: candidate_psnr,
                patch_area: patches.total_area(),
                patch_count: patches.len(),
                outcome: UpdateOutcome::RejectedPsnrFloor,
            });
            termination = Termination::PsnrFloor;
            break;
        }
        current = candidate;
        trace.push(IterationRecord {
            iteration: t,
            loss,
            psnr: candidate_psnr,
            patch_area: patches.total_area(),
            patch_count: patches.len(),
            outcome: UpdateOutcome::Applied,
        });
    }

    let final_psnr = if patches.is_empty() {
        f64::INFINITY
    } else {
        psnr_or_infinite(img, &current, &rasterize(&patches, height, width)?)
    };
    Ok(AttackResult {
        adversarial_image: current,
        patches,
        iterations_run: trace.len(),
        final_psnr,
        termination,
        trace,
        init_shortfalls,
    })
}

/// Runs the clean forward pass and promotes confident detections to
/// ground truth.
fn pseudo_ground_truth(
    img: &ImageBuffer,
    detector: &dyn SingleShotDetector,
    score_floor: f64,
) -> Result<GroundTruth> {
    let out = detector.forward(img)?;
    let kept = postprocess(
        &out,
        &PostprocessConfig {
            score_floor,
            ..PostprocessConfig::default()
        },
    );
    let boxes: Vec<BoxCwh> = kept.iter().map(|d| d.bbox).collect();
    let labels: Vec<usize> = kept.iter().map(|d| d.class).collect();
    GroundTruth::new(boxes, labels)
}

/// A one-object ground truth used only for patch placement when the real
/// scene is empty: a nominal box at the image center.
fn pseudo_geometry_object(height: usize, width: usize) -> Result<GroundTruth> {
    let side = PSEUDO_OBJECT_SCALE * height.min(width) as f64;
    GroundTruth::new(
        vec![BoxCwh::new(width as f64 / 2.0, height as f64 / 2.0, side, side)?],
        vec![1],
    )
}

fn zero_breakdown() -> LossBreakdown {
    LossBreakdown {
        tpc: 0.0,
        tps: 0.0,
        fpc: 0.0,
        total: 0.0,
        active_tp_count: 0,
        active_fp_count: 0,
    }
}

fn zero_grad(height: usize, width: usize) -> Array3<f64> {
    Array3::zeros((height, width, 3))
}

/// Masked PSNR, treating an empty mask as "nothing perturbed".
fn psnr_or_infinite(orig: &ImageBuffer, pert: &ImageBuffer, mask: &crate::mask::PixelMask) -> f64 {
    if mask.is_empty() {
        f64::INFINITY
    } else {
        psnr(orig, pert, mask).unwrap_or(f64::INFINITY)
    }
}

/// Adds seeded zero-mean normal noise inside the patch mask, with the
/// standard deviation searched so the masked PSNR matches `target_psnr`
/// within 0.1 dB, then clips to valid pixel range.
///
/// Clipping bounds how much distortion the mask can absorb; when even
/// saturating noise stays above the target the closest achievable image is
/// returned. The achieved PSNR is always reported alongside the image.
pub fn random_baseline(
    img: &ImageBuffer,
    patches: &PatchSet,
    target_psnr: f64,
    seed: u64,
) -> Result<(ImageBuffer, f64)> {
    if patches.is_empty() {
        return Err(BgError::InvalidArgument(
            "the noise baseline needs at least one patch".into(),
        ));
    }
    if !(target_psnr.is_finite() && target_psnr > 0.0) {
        return Err(BgError::InvalidArgument(format!(
            "target PSNR must be positive, got {target_psnr}"
        )));
    }
    let (height, width) = (img.height(), img.width());
    let mask = rasterize(patches, height, width)?;
    if mask.is_empty() {
        return Err(BgError::InvalidArgument(
            "the patch mask rasterizes to zero pixels".into(),
        ));
    }

    // One fixed draw of unit normals, scaled during the search so the
    // noise field is a deterministic function of the seed alone.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = zero_grad(height, width);
    for y in 0..height {
        for x in 0..width {
            if mask.get(y, x) {
                for c in 0..3 {
                    unit[[y, x, c]] = StandardNormal.sample(&mut rng);
                }
            }
        }
    }
    // masked_update subtracts its delta, so negate to add noise.
    let noisy = |sigma: f64| -> Result<(ImageBuffer, f64)> {
        let delta = unit.mapv(|n| -sigma * n);
        let image = masked_update(img, &delta, &mask)?;
        let achieved = psnr(img, &image, &mask)?;
        Ok((image, achieved))
    };

    // PSNR is nonincreasing in sigma (clipping only flattens it), so
    // bracket the target and bisect.
    let mut hi = 1.0;
    let mut hi_psnr = noisy(hi)?.1;
    while hi_psnr > target_psnr && hi < 1e6 {
        hi *= 2.0;
        hi_psnr = noisy(hi)?.1;
    }
    if hi_psnr > target_psnr {
        // Saturated: even extreme noise cannot reach the target.
        return noisy(hi);
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if noisy(mid)?.1 > target_psnr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    noisy(hi)
}

/// Pastes the patch-region pixels of a finished attack into another image
/// at the same coordinates — the transfer primitive: perturbations
/// optimized against one detector, evaluated against another.
pub fn replay_patches(
    img: &ImageBuffer,
    patches: &PatchSet,
    source: &AttackResult,
) -> Result<ImageBuffer> {
    let src = &source.adversarial_image;
    if src.height() != img.height() || src.width() != img.width() {
        return Err(BgError::ShapeMismatch(format!(
            "source image is {}x{}, target is {}x{}",
            src.height(),
            src.width(),
            img.height(),
            img.width()
        )));
    }
    let mask = rasterize(patches, img.height(), img.width())?;
    let mut out = img.pixels().clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(y, x) {
                for c in 0..3 {
                    out[[y, x, c]] = src.pixels()[[y, x, c]];
                }
            }
        }
    }
    ImageBuffer::from_array(out)
}

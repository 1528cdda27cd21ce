//! Imperceptible background-patch attacks against single-shot object
//! detection modules.
//!
//! The toolkit perturbs a handful of small background rectangles — regions
//! with zero overlap with any annotated object — so that a fully
//! convolutional detector mislabels its true positives, regresses their
//! boxes away, and hallucinates false positives, while the perturbation
//! stays above a PSNR floor (i.e. stays hard to see). Because the module is
//! fully convolutional, its receptive fields extend well past each object,
//! which is exactly the surface the attack exercises.
//!
//! Crate layout:
//! - [`boxes`], [`image`], [`mask`], [`patches`]: geometric primitives,
//!   real-valued image buffers, pixel masks.
//! - [`detector`]: the single-shot-module boundary (forward pass, analytic
//!   input gradients, anchor/offset codec) plus a small trainable detector
//!   and synthetic dataset so everything runs at desk scale.
//! - [`losses`]: the three attack losses and their detection-selection rules.
//! - [`geometry`]: where patches live — object clustering, sliding-window
//!   initialization, stride-wise expansion.
//! - [`attack`]: the optimization loop (normalized masked updates, PSNR
//!   budget, termination), random-noise baseline, patch replay.
//! - [`eval`]: PSNR / mAP metrics, ablation groupings, COCO-style dataset
//!   I/O, reports and plots.
//! - [`config`], [`cli`]: flat key-value config files and the `bgpatch`
//!   command-line front end.

pub mod attack;
pub mod boxes;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod mask;
pub mod patches;

pub use crate::error::{BgError, Result};

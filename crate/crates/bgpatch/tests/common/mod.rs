//! Shared fixtures for integration tests.
//!
//! Training the bundled detector takes a minute or two, so all integration
//! tests share one detector: trained once per seed, cached as a weight file
//! under the cargo target tmpdir, and loaded from there on later runs. The
//! trainer is bit-deterministic, so a cache hit and a fresh run are
//! indistinguishable.

use std::path::PathBuf;
use std::sync::OnceLock;

use bgpatch::detector::toy::train::{toy_ssm_build_with, ToyTrainConfig};
use bgpatch::detector::toy::ToyDetector;

/// Seed for the primary fixture detector.
pub const FIXTURE_SEED: u64 = 2024;

/// Seed for the transfer-target detector (same architecture, independently
/// trained weights).
pub const TRANSFER_SEED: u64 = 77;

/// Dataset indices at or beyond this never appear in training.
pub fn heldout_start() -> u64 {
    ToyTrainConfig::default().train_images as u64
}

/// Bump when the architecture or a training knob outside the filename
/// changes, so stale caches never load.
const FIXTURE_REV: u32 = 9;

fn load_or_train(seed: u64) -> ToyDetector {
    let cfg = ToyTrainConfig::default();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join(format!(
        "toy-r{FIXTURE_REV}-seed{seed}-e{}-n{}-ls{}.weights",
        cfg.epochs, cfg.train_images, cfg.label_smoothing
    ));
    if let Ok(det) = ToyDetector::load(&path) {
        let info = det.train_info();
        if info.seed == seed && info.epochs == cfg.epochs && info.train_images == cfg.train_images
        {
            return det;
        }
    }
    let det = toy_ssm_build_with(seed, &cfg).expect("fixture training converges");
    det.save(&path).expect("cache fixture weights");
    det
}

/// The shared trained detector (trains on first use, then caches).
pub fn trained_detector() -> &'static ToyDetector {
    static DET: OnceLock<ToyDetector> = OnceLock::new();
    DET.get_or_init(|| load_or_train(FIXTURE_SEED))
}

/// An independently trained detector for transfer experiments.
pub fn transfer_detector() -> &'static ToyDetector {
    static DET: OnceLock<ToyDetector> = OnceLock::new();
    DET.get_or_init(|| load_or_train(TRANSFER_SEED))
}

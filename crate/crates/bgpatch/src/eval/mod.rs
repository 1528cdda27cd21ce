//! Evaluation harness: image-quality and detection metrics, result
//! groupings for ablations, dataset ingestion, and report emission.

pub mod metrics;

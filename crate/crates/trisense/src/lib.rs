//! Tri-modal industrial anomaly detection over RGB images, infrared images,
//! and laser-scanned point clouds.
//!
//! The pipeline stages are:
//!
//! 1. **ingest** – dataset layout scanning plus all on-disk formats (XYZ /
//!    ASCII PLY clouds, PNG / PNM images, point-label files, feature files).
//! 2. **features** – per-patch image descriptors and per-point FPFH
//!    descriptors, or import of externally computed features.
//! 3. **registration** – rigid Procrustes fit, ICP refinement, and dual-scan
//!    merging for point clouds.
//! 4. **memory_bank** – greedy k-center coreset banks of normal features and
//!    nearest-neighbor anomaly scoring with robust score normalization.
//! 5. **fusion** – a one-class SVM decision gate (plus rule-based variants)
//!    combining per-modality scores into one object score.
//! 6. **metrics** – object-level AUROC and pixel/point-level AUROC, F1-max,
//!    AUPR, aggregated into per-category reports.
//! 7. **synth** – deterministic synthetic dataset generation with
//!    per-modality defect visibility control, for end-to-end verification.
//!
//! [`pipeline`] chains the stages behind a single configuration; the
//! `trisense` binary exposes them as subcommands.

pub mod core;
pub mod ingest;
pub mod features;
pub mod registration;
pub mod spatial;
pub mod memory_bank;
pub mod fusion;
pub mod metrics;
pub mod synth;
pub mod pipeline;

pub use crate::core::{derive_object_label, ModalityId, ModalityLabels, ObjectLabel, SampleRef};

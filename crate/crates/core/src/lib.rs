//! Retina-aware discrete-latent anomaly detection for OCT B-scans.
//!
//! A VQGAN-style encoder / codebook / decoder is trained on normal scans only,
//! using triplets built from an anchor, a scan of another patient and a
//! structurally perturbed copy of the anchor. At inference, pathology shows up
//! as reconstruction discrepancy: the mean absolute residual scores the image
//! and a weighted L1/SSIM error field localizes the lesion.
//!
//! Module map:
//!
//! - [`data`]: B-scan ingestion, synthetic layered phantoms, triplet assembly
//! - [`roi`]: retinal band extraction with a horizontal Gabor bank
//! - [`perturb`]: layer deformations and fluid-like dark insertions
//! - [`nn`], [`model`]: hand-differentiated conv nets and the VQGAN
//! - [`loss`]: every objective term with analytic gradients
//! - [`train`]: the training loop, checkpoints and loss log
//! - [`score`], [`eval`]: scoring, localization maps, thresholds and metrics
//! - [`config`]: the flat `key: value` run configuration
//!
//! Batch-level work (per-anchor passes, per-image scoring, ROI extraction over
//! a dataset) goes through [`exec::Exec`], which runs on rayon when the
//! `parallel` feature is enabled and sequentially otherwise. Reductions are
//! always performed in input order so results do not depend on scheduling.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod loss;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod roi;
pub mod score;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;

/// Grayscale image with intensities in `[0, 1]`, indexed `[row, col]`.
pub type Image = ndarray::Array2<f32>;

/// Binary per-pixel mask, indexed `[row, col]`.
pub type Mask = ndarray::Array2<bool>;

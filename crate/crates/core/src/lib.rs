//! Unsupervised variational segmentation built on the Chan-Vese energy.
//!
//! The likelihood of the classical region-based model is replaced by an
//! evidence lower bound over a per-pixel Gaussian latent space: an encoder
//! maps the image into latent statistics, a decoder reconstructs it, and
//! region priors pull the latent values apart. The resulting energy is
//! minimized by alternating gradient steps on the networks and level field
//! with an exact shrinkage update for the TV splitting variable.
//!
//! Modules:
//! - [`image`]: raster I/O, masks, dataset splits, synthetic fixtures
//! - [`grad`]: forward differences, TV norm, shrinkage operator
//! - [`gaussian`]: latent priors, closed-form KL, reparameterized sampling
//! - [`tape`]: reverse-mode automatic differentiation
//! - [`nets`]: U-nets, discriminator, mask relaxations, checkpoints
//! - [`energy`]: every objective (baseline, single-image, multi-phase,
//!   dataset, augmentation-consistency, adversarial region terms)
//! - [`solver`]: the alternating minimization loops and dataset trainer
//! - [`metrics`]: confusion counts, F-measure, mIoU, accuracy, matching

pub mod energy;
pub mod error;
pub mod gaussian;
pub mod grad;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod solver;
pub mod tape;

pub use error::{Error, Result};

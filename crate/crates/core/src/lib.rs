//! Weakly-supervised segmentation seed pipeline.
//!
//! A desk-scale, CPU-trainable implementation of the class re-activation
//! workflow for generating segmentation pseudo masks from image-level
//! labels: a synthetic benchmark generator with confusable classes, a
//! small convolutional classifier trained with BCE and re-activated with
//! a softmax cross-entropy head on class-masked features, activation-map
//! extraction with several weight variants, adversarial-climbing and
//! random-walk refinement, and pseudo-mask evaluation (mIoU, flaw
//! taxonomy, threshold search).
//!
//! The crate is organized by pipeline stage:
//!
//! - [`synthgen`]: deterministic synthetic corpus with pixel ground truth
//! - [`losses`]: BCE/SCE/segmentation losses and their closed-form gradients
//! - [`autodiff`]: a small reverse-mode tape used by the trainer
//! - [`nets`]: encoder, classification heads, segmentation head, checkpoints
//! - [`activation`]: CAM extraction, feature masking, weight variants
//! - [`trainer`]: two-phase training, baselines, gradient monitoring
//! - [`refine`]: adversarial climbing and boundary-gated random walk
//! - [`evalstats`]: thresholding, mIoU, flaw statistics, threshold search
//! - [`pipeline`]: batch commands, config files, run manifests, plots

pub mod activation;
pub mod autodiff;
pub mod error;
pub mod evalstats;
pub mod losses;
pub mod nets;
pub mod pipeline;
pub mod refine;
pub mod rngstream;
pub mod synthgen;
pub mod trainer;

pub use error::{RecamError, Result};

//! Out-of-distribution detection with masked-image-modeling features.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! 1. [`mim`]: a small patch transformer pretrained by masked patch
//!    reconstruction (pixel regression or k-means codebook targets), with a
//!    hand-written backward pass and a finite-difference checker.
//! 2. [`finetune`]: label-smoothed classifier fine-tuning (multi-class,
//!    one-class and intermediate stages) and pooled feature extraction.
//! 3. [`gaussian`]: class-conditional Gaussians with a shared covariance and
//!    Mahalanobis scoring.
//! 4. [`scores`]: softmax, entropy, energy and gradient-norm scores, all
//!    oriented so that higher means more out-of-distribution.
//! 5. [`evaluate`]: AUROC, FPR at a fixed TPR, histograms and near-OOD
//!    confusion counts.
//!
//! [`datamodel`] holds the shared containers and file formats, including the
//! `MOODFD` feature dump that lets features from any backbone be scored.

pub mod datamodel;
pub mod error;
pub mod evaluate;
pub mod finetune;
pub mod gaussian;
pub mod linalg;
pub mod mim;
pub mod scores;

pub use error::{MoodError, Result};

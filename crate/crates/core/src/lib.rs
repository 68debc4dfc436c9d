//! Anatomy-change prediction for head-and-neck radiotherapy volumes.
//!
//! From seven aligned input volumes (planning CT, its two tumor masks, the
//! planned dose and the first-fraction CBCT with its masks) a network
//! predicts a dense displacement field. Warping the baseline image and masks
//! with that field yields the predicted late-fraction anatomy.
//!
//! Module map:
//!
//! - [`volume`]: the scalar grid type, `.mvol` persistence and preprocessing.
//! - [`dataset`]: case bundles, seven-channel input stacking, augmentation, splits.
//! - [`phantom`]: procedural longitudinal cases with a known deformation.
//! - [`warp`]: pull warping with trilinear / nearest sampling and its adjoint.
//! - [`loss`]: SSIM, soft Dice and diffusion terms and their composite.
//! - [`metrics`]: MSE / SSIM / Dice / ASD evaluation and report tables.
//! - [`tape`]: the reverse-mode tape the network is differentiated with.
//! - [`model`]: windowed-attention encoder, conv decoder, checkpoints, gradcheck.
//! - [`train`]: Adam, plateau scheduling, the training loop and experiment harnesses.

pub mod dataset;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod real;
pub mod tape;
pub mod train;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use real::Real;

//! Unpaired clear-to-rainy image translation at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`substrate`]: reverse-mode autodiff over 64-bit tensors.
//! * [`semantic`]: segmentation maps and mPA / mIoU scores.
//! * [`losses`]: TPS, point-to-line, adversarial and the NCE family.
//! * [`models`]: generator, patch discriminator, projection heads.
//! * [`synthdata`]: procedural clear/rainy scenes with segmentation truth.
//! * [`metrics`]: MMD, energy distance, point-to-segment diagnostics.
//! * [`harness`]: training loop, checkpoints, evaluation and ablations.

pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod semantic;
pub mod substrate;
pub mod synthdata;

pub use error::{Error, Result};

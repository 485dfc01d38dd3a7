//! Semi-supervised panoramic room layout estimation.
//!
//! A small convolutional layout network is trained with a Mean-Teacher
//! scheme on synthetic equirectangular rooms. Unlabeled panoramas are
//! perturbed twice: once through the image (weak geometric and strong
//! photometric augmentation) and once through the encoder features
//! (distortion-aware masking). Both student predictions are pulled towards
//! the teacher's.

pub mod augment;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

//! Margin-regularized embedding training at desk scale: joint softmax +
//! centre + minimum-margin supervision over an MLP backbone, with a
//! long-tailed synthetic data generator and a verification/identification
//! evaluation kit. Everything is seeded and bit-reproducible.

pub mod centres;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod numeric;
pub mod trainer;

pub use error::{MmlError, Result};

//! Bark-texture species classification: corpus scanning, class rebalancing with
//! augmentation, preprocessing, transfer-learning classifiers, training and evaluation.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod model;
mod plot;
pub mod preprocess;
pub mod resampler;
pub mod trainer;

pub use error::{Error, Result};

//! Diversity and correlation shift between a training and a test
//! environment: an environment discriminator learns shift-carrying features,
//! Gaussian KDEs model them, and importance sampling evaluates the two shift
//! integrals. Synthetic generators with exact ground truth, baseline
//! two-sample metrics and benchmark ranking-score arithmetic come along.

pub mod baselines;
pub mod benchscore;
pub mod commands;
pub mod data;
pub mod datagen;
pub mod density;
pub mod discriminator;
pub mod error;
pub mod estimator;
pub mod rng;

pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use rng::Rng;

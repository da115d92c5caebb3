//! Balancing binary image datasets with cycle-consistent translators: every
//! training image gets a label-flipped complement, and a dense-convolutional
//! classifier is trained and evaluated with and without the complements.

pub mod augment;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod harness;
pub mod seed;

pub use cyclebalance_nn as nn;
pub use error::{Error, Result};

pub type Sample32 = data::Sample<f32>;
pub type Generator32 = gan::Generator<f32>;
pub type GeneratorPair32 = gan::GeneratorPair<f32>;
pub type GanTrainState32 = gan::GanTrainState<f32>;
pub type DenseNet32 = classifier::DenseNet<f32>;
pub type AugmentedDataset32 = augment::AugmentedDataset<f32>;

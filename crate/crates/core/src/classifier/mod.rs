//! Dense-connectivity binary classifier with a single-logit head.

mod model;
mod train;

pub use model::{sigmoid, DenseNet, DenseNetCache, DenseNetConfig, ForwardOutput, Stem};
pub use train::{
    bce_loss, load_classifier, load_pretrained_backbone, predict, save_classifier, train_classifier, ClassifierConfig,
    EpochMetrics, TrainOutcome, TrainRecord, BCE_EPS,
};

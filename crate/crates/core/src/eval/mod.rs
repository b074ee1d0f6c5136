//! Synthetic data, toy training and the saliency evaluation protocols.

pub mod benchmark;
pub mod dataset;
pub mod metrics;
pub mod morf;
pub mod sanity;
pub mod train;

pub use dataset::{generate_synthetic_dataset, AnnotatedSample, BBox, Mask, ShapeClass, SynthConfig};
pub use metrics::{outside_inside_ratio, pearson, pointing_game, positive_ratio, PointingTally};
pub use morf::{MorfConfig, MorfCurve};
pub use sanity::{sanity_check, SanityReport, SanityStage};
pub use train::{train_toy_model, Preset, TrainConfig, TrainReport};

pub(crate) use crate::attribution::trace::argmax;

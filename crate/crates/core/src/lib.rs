//! CNN inference and class-specific relevance attribution by gradient
//! hedging, with the reference propagation rules and saliency evaluation
//! protocols (pointing game, positive ratio, MoRF insertion,
//! outside-inside ratio, cascading randomization).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod kernels;
pub mod layer;
pub mod model;
pub mod render;
pub mod tensor;

pub use attribution::{attribute, attribute_baseline, Attribution, BaselineMethod, HedgeConfig, Toggles};
pub use error::{Error, ErrorClass, Result};
pub use layer::{LayerKind, LayerSpec, WeightTransform};
pub use model::{load_model, save_model, ModelGraph, Normalization};
pub use tensor::Tensor;

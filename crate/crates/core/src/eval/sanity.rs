//! Cascading parameter randomization: re-attribute after randomizing the
//! weighted layers one at a time from the output back to the input.

use crate::attribution::{attribute, HedgeConfig};
use crate::error::{Error, Result};
use crate::model::{randomize_layers, ModelGraph};
use crate::tensor::Tensor;

use super::metrics::pearson;

#[derive(Debug, Clone, PartialEq)]
pub struct SanityStage {
    /// Layers randomized so far (empty for the original model).
    pub randomized: Vec<usize>,
    pub map: Tensor,
    /// |Pearson| against the original map.
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanityReport {
    pub target: usize,
    pub stages: Vec<SanityStage>,
}

/// Runs the cascade. `cascade` lists layer indices in randomization order;
/// by default every weighted layer from last to first. Each randomized
/// layer draws from an RNG seeded by `(seed, layer)`.
pub fn sanity_check(
    model: &ModelGraph,
    input: &Tensor,
    target: usize,
    cascade: Option<&[usize]>,
    seed: u64,
    config: &HedgeConfig,
) -> Result<SanityReport> {
    let order: Vec<usize> = match cascade {
        Some(c) => c.to_vec(),
        None => model.weighted_layer_indices().into_iter().rev().collect(),
    };
    if order.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "sanity cascade needs at least two weighted layers, got {}",
            order.len()
        )));
    }
    if let Some(&k) = order.iter().find(|&&k| k >= model.layers().len() || !model.layers()[k].is_weighted()) {
        return Err(Error::InvalidArgument(format!("layer {k} is not a weighted layer")));
    }
    let original = attribute(model, input, target, config)?.map;
    let mut stages = vec![SanityStage {
        randomized: Vec::new(),
        map: original.clone(),
        correlation: 1.0,
    }];
    for i in 0..order.len() {
        let randomized = order[..=i].to_vec();
        let scrambled = randomize_layers(model, &randomized, seed)?;
        let map = attribute(&scrambled, input, target, config)?.map;
        let correlation = pearson(original.data(), map.data())?.abs();
        stages.push(SanityStage {
            randomized,
            map,
            correlation,
        });
    }
    Ok(SanityReport { target, stages })
}

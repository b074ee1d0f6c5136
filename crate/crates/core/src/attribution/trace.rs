use crate::error::{Error, Result};
use crate::layer::PoolIndices;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Inputs of every layer recorded during one forward pass.
///
/// `inputs[k]` is the input of layer `k`; the final entry is the logits, so
/// there are `layers + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub inputs: Vec<Tensor>,
    pub pool_indices: Vec<Option<PoolIndices>>,
}

impl ActivationTrace {
    pub fn logits(&self) -> &Tensor {
        self.inputs.last().expect("trace is never empty")
    }

    /// Index of the largest logit of the first batch item; ties go to the lower index.
    pub fn predicted_class(&self) -> usize {
        argmax(self.logits().data())
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the model, recording every intermediate input.
pub fn forward_with_trace(model: &ModelGraph, input: &Tensor) -> Result<ActivationTrace> {
    let [_, c, h, w] = model.input_shape();
    if input.shape() != [1, c, h, w] {
        return Err(Error::shape(
            "model input",
            format!("expected [1, {c}, {h}, {w}], got {:?}", input.shape()),
        ));
    }
    input.ensure_finite("model input")?;
    let mut inputs = Vec::with_capacity(model.layers().len() + 1);
    let mut pool_indices = Vec::with_capacity(model.layers().len());
    inputs.push(input.clone());
    for (k, layer) in model.layers().iter().enumerate() {
        let fwd = layer.forward_traced(&inputs[k]).map_err(|e| e.at_layer(k))?;
        inputs.push(fwd.output);
        pool_indices.push(fwd.pool_indices);
    }
    Ok(ActivationTrace { inputs, pool_indices })
}

/// Gradients of one output logit with respect to the inputs of the
/// classification-stage layers, from the output down to `stop_layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGradients {
    pub target: usize,
    pub stop_layer: usize,
    /// `grads[k - stop_layer]` is the gradient at the input of layer `k`.
    grads: Vec<Tensor>,
}

impl TargetGradients {
    pub fn at(&self, layer: usize) -> Option<&Tensor> {
        layer
            .checked_sub(self.stop_layer)
            .and_then(|i| self.grads.get(i))
    }
}

/// Backpropagates a one-hot seed (scaled by `seed_scale`) on logit `target`
/// through layers `L-1 ..= stop_layer`.
pub fn target_gradients(
    model: &ModelGraph,
    trace: &ActivationTrace,
    target: usize,
    stop_layer: usize,
    seed_scale: f32,
) -> Result<TargetGradients> {
    let classes = model.num_classes();
    if target >= classes {
        return Err(Error::InvalidClass { class: target, classes });
    }
    let layers = model.layers();
    if stop_layer >= layers.len() {
        return Err(Error::InvalidArgument(format!("stop layer {stop_layer} out of range")));
    }
    let logits = trace.logits();
    let mut g = Tensor::from_fn(logits.shape().to_vec(), |i| if i == target { seed_scale } else { 0.0 });
    let mut grads = Vec::with_capacity(layers.len() - stop_layer);
    for k in (stop_layer..layers.len()).rev() {
        g = layers[k]
            .backward_gradient(&trace.inputs[k], &g, trace.pool_indices[k].as_ref())
            .map_err(|e| e.at_layer(k))?;
        grads.push(g.clone());
    }
    grads.reverse();
    Ok(TargetGradients {
        target,
        stop_layer,
        grads,
    })
}

/// Signed relevance aligned to the input of `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub relevance: Tensor,
    pub layer: usize,
    /// Absolute sum of the normalized initial contribution map.
    pub tau: f64,
}

/// Gradient-weighted activations at `layer`:
/// `G = lambda * x * spatial_mean(dy_t/dx)` per channel, with
/// `lambda = 1 / |sum G_raw|`. Negative entries are kept.
pub fn initial_contribution_map(
    trace: &ActivationTrace,
    grads: &TargetGradients,
    layer: usize,
) -> Result<RelevanceMap> {
    let x = &trace.inputs[layer];
    let g = grads
        .at(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("no gradient recorded at layer {layer}")))?;
    x.expect_same_shape(g, "initial contribution map")?;
    let (channels, area) = match x.shape()[..] {
        [1, c, h, w] => (c, h * w),
        [1, f] => (f, 1),
        _ => {
            return Err(Error::shape(
                "initial contribution map",
                format!("expected a single-item batch, got {:?}", x.shape()),
            ))
        }
    };
    let xd = x.data();
    let gd = g.data();
    let mut raw = vec![0.0f64; xd.len()];
    for c in 0..channels {
        let span = c * area..(c + 1) * area;
        let weight = gd[span.clone()].iter().map(|&v| v as f64).sum::<f64>() / area as f64;
        for i in span {
            raw[i] = xd[i] as f64 * weight;
        }
    }
    let total: f64 = raw.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::DegenerateMap(format!(
            "gradient-weighted activations at layer {layer} sum to {total}"
        )));
    }
    let lambda = 1.0 / total.abs();
    let relevance = Tensor::new(x.shape().to_vec(), raw.iter().map(|v| (v * lambda) as f32).collect())?;
    let tau = relevance.sum().abs();
    Ok(RelevanceMap { relevance, layer, tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerSpec;
    use crate::model::Normalization;

    fn gap_linear(w: Vec<f32>, classes: usize, channels: usize) -> ModelGraph {
        let lin = LayerSpec::linear(Tensor::new(vec![classes, channels], w).unwrap(), None).unwrap();
        ModelGraph::new(
            vec![LayerSpec::global_avg_pool(), lin],
            [1, channels, 1, 2],
            Normalization::identity(channels),
        )
        .unwrap()
    }

    #[test]
    fn trace_has_layers_plus_one_entries() {
        let m = gap_linear(vec![1.0, -1.0], 2, 1);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let tr = forward_with_trace(&m, &x).unwrap();
        assert_eq!(tr.inputs.len(), 3);
        assert_eq!(tr.logits(), &m.forward(&x).unwrap());
    }

    #[test]
    fn initial_map_single_channel_example() {
        // gradient of logit 0 at the GAP input is 1/2 everywhere; its mean
        // weights x = [1, 3] into [0.5, 1.5], normalized to [0.25, 0.75].
        let m = gap_linear(vec![1.0, -1.0], 2, 1);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let tr = forward_with_trace(&m, &x).unwrap();
        let g = target_gradients(&m, &tr, 0, 0, 1.0).unwrap();
        let map = initial_contribution_map(&tr, &g, 0).unwrap();
        assert!((map.relevance.data()[0] - 0.25).abs() < 1e-7);
        assert!((map.relevance.data()[1] - 0.75).abs() < 1e-7);
        assert!((map.tau - 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_degenerate() {
        let m = gap_linear(vec![0.0, 1.0], 2, 1);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let tr = forward_with_trace(&m, &x).unwrap();
        let g = target_gradients(&m, &tr, 0, 0, 1.0).unwrap();
        assert!(matches!(
            initial_contribution_map(&tr, &g, 0),
            Err(Error::DegenerateMap(_))
        ));
    }

    #[test]
    fn invalid_class_rejected() {
        let m = gap_linear(vec![1.0, -1.0], 2, 1);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let tr = forward_with_trace(&m, &x).unwrap();
        assert!(matches!(
            target_gradients(&m, &tr, 2, 0, 1.0),
            Err(Error::InvalidClass { class: 2, classes: 2 })
        ));
    }

    #[test]
    fn single_linear_gradient_is_weight_row() {
        let lin = LayerSpec::linear(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, -6.0]).unwrap(), None)
            .unwrap();
        let m = ModelGraph::with_target(
            vec![LayerSpec::flatten(), lin],
            [1, 3, 1, 1],
            Normalization::identity(3),
            0,
            None,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3, 1, 1], vec![0.1, 0.2, 0.3]).unwrap();
        let tr = forward_with_trace(&m, &x).unwrap();
        let g = target_gradients(&m, &tr, 1, 1, 1.0).unwrap();
        assert_eq!(g.at(1).unwrap().data(), &[-4.0, 5.0, -6.0]);
        let g2 = target_gradients(&m, &tr, 1, 1, 2.0).unwrap();
        assert_eq!(g2.at(1).unwrap().data(), &[-8.0, 10.0, -12.0]);
    }
}

//! Reference methods: the generic proportional rule, the alpha-beta rule and
//! the upsampled gradient-activation map.

use crate::error::{Error, Result};
use crate::layer::WeightTransform;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

use super::trace::{forward_with_trace, initial_contribution_map, target_gradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMethod {
    GenericLrp,
    /// Requires `alpha - beta = 1`.
    LrpAlphaBeta { alpha: f64, beta: f64 },
    GradActivation,
}

impl BaselineMethod {
    pub fn name(&self) -> String {
        match self {
            BaselineMethod::GenericLrp => "generic_lrp".into(),
            BaselineMethod::LrpAlphaBeta { alpha, beta } => format!("lrp_ab_{alpha}_{beta}"),
            BaselineMethod::GradActivation => "grad_activation".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineAttribution {
    /// Relevance at the input, `1,C,H,W` (`1,1,H,W` for gradient activation).
    pub full: Tensor,
    pub map: Tensor,
    /// `layer_sums[k]` is the relevance total at the input of layer `k`;
    /// the last entry is the seed. Empty for gradient activation.
    pub layer_sums: Vec<f64>,
    pub predicted: usize,
}

/// Runs a baseline attribution for logit `target`. The relevance methods are
/// seeded with `seed_scale * y_t` at position `target`.
pub fn attribute_baseline(
    model: &ModelGraph,
    input: &Tensor,
    target: usize,
    method: BaselineMethod,
    seed_scale: f32,
    epsilon: f64,
) -> Result<BaselineAttribution> {
    if let BaselineMethod::LrpAlphaBeta { alpha, beta } = method {
        if ((alpha - beta) - 1.0).abs() > 1e-9 || beta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha - beta must equal 1 with beta >= 0, got alpha={alpha} beta={beta}"
            )));
        }
    }
    let classes = model.num_classes();
    if target >= classes {
        return Err(Error::InvalidClass { class: target, classes });
    }
    let trace = forward_with_trace(model, input)?;
    let predicted = trace.predicted_class();

    if method == BaselineMethod::GradActivation {
        let tl = model.target_layer();
        let grads = target_gradients(model, &trace, target, tl, seed_scale)?;
        let g = initial_contribution_map(&trace, &grads, tl).map_err(|e| e.at_layer(tl))?;
        let [_, _, h, w] = model.input_shape();
        let low = match g.relevance.shape()[..] {
            [1, _, _, _] => g.relevance.channel_sum()?,
            _ => Tensor::full(vec![1, 1], g.relevance.sum() as f32),
        };
        let map = bilinear_resize(&low, h, w)?;
        let full = map.reshape(vec![1, 1, h, w])?;
        return Ok(BaselineAttribution {
            full,
            map,
            layer_sums: Vec::new(),
            predicted,
        });
    }

    let layers = model.layers();
    let logits = trace.logits();
    let seed_value = logits.data()[target] * seed_scale;
    let mut r = Tensor::from_fn(logits.shape().to_vec(), |i| if i == target { seed_value } else { 0.0 });
    let mut sums = vec![0.0; layers.len() + 1];
    sums[layers.len()] = r.sum();
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        let x = &trace.inputs[k];
        r = match method {
            BaselineMethod::LrpAlphaBeta { alpha, beta } if layer.is_weighted() => {
                let pos = layer.redistribute_relevance(x, WeightTransform::PositivePart, &r, epsilon);
                let neg = layer.redistribute_relevance(x, WeightTransform::NegativePart, &r, epsilon);
                pos.and_then(|p| neg.and_then(|n| p.scale(alpha as f32).sub(&n.scale(beta as f32))))
            }
            _ => layer.redistribute_relevance(x, WeightTransform::Identity, &r, epsilon),
        }
        .map_err(|e| e.at_layer(k))?;
        sums[k] = r.sum();
    }
    r.ensure_finite("baseline attribution")?;
    let map = r.channel_sum()?;
    Ok(BaselineAttribution {
        full: r,
        map,
        layer_sums: sums,
        predicted,
    })
}

/// Bilinear resize of an `H,W` map with half-pixel centers and edge clamping.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [in_h, in_w] = map.shape()[..] else {
        return Err(Error::shape("bilinear_resize", format!("expected H,W map, got {:?}", map.shape())));
    };
    let src = |size_in: usize, size_out: usize, o: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * size_in as f32 / size_out as f32 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(size_in - 1);
        let i1 = (i0 + 1).min(size_in - 1);
        (i0, i1, s - i0 as f32)
    };
    let d = map.data();
    Ok(Tensor::from_fn(vec![out_h, out_w], |i| {
        let (y0, y1, fy) = src(in_h, out_h, i / out_w);
        let (x0, x1, fx) = src(in_w, out_w, i % out_w);
        let top = d[y0 * in_w + x0] * (1.0 - fx) + d[y0 * in_w + x1] * fx;
        let bot = d[y1 * in_w + x0] * (1.0 - fx) + d[y1 * in_w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

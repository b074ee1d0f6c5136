//! Class-specific attribution by gradient hedging, plus the reference
//! relevance-propagation baselines.
//!
//! The backward pass has two stages. Layers at or after the target layer
//! (by default the global average pool) form the classification stage and
//! are traversed by ordinary gradients, producing the initial contribution
//! map. Earlier layers form the feature-extraction stage: each conv or
//! linear layer re-balances the positive and negative sections of the
//! incoming relevance and propagates them with [`hedge::hedge_layer`].
//! The first layer uses the bounded-input rule.

pub mod baseline;
pub mod hedge;
pub mod trace;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{LayerSpec, DEFAULT_EPSILON};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

pub use baseline::{attribute_baseline, BaselineAttribution, BaselineMethod};
pub use hedge::{hedge_layer, modulate_sections, HedgeOutput, HedgeStep, Modulated, SectionPair};
pub use trace::{
    forward_with_trace, initial_contribution_map, target_gradients, ActivationTrace, RelevanceMap, TargetGradients,
};

/// Which hedging components participate in `R = C + A + U - Psi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Toggles {
    pub c: bool,
    pub a: bool,
    pub u: bool,
    pub psi: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        c: true,
        a: true,
        u: true,
        psi: true,
    };

    /// The five component combinations of the ablation study, full method last.
    pub const ABLATION_ROWS: [Toggles; 5] = [
        Toggles {
            c: true,
            a: false,
            u: false,
            psi: false,
        },
        Toggles {
            c: true,
            a: false,
            u: false,
            psi: true,
        },
        Toggles {
            c: false,
            a: true,
            u: true,
            psi: false,
        },
        Toggles {
            c: true,
            a: true,
            u: true,
            psi: false,
        },
        Toggles::ALL,
    ];
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::ALL
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.c, "C"), (self.a, "A"), (self.u, "U"), (self.psi, "Psi")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for Toggles {
    type Err = Error;

    /// Accepts component names joined by `+` or `,` (e.g. `C+Psi`), `all` or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Toggles::ALL);
        }
        let mut t = Toggles {
            c: false,
            a: false,
            u: false,
            psi: false,
        };
        if s.eq_ignore_ascii_case("none") {
            return Ok(t);
        }
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "c" => t.c = true,
                "a" => t.a = true,
                "u" => t.u = true,
                "psi" | "ψ" => t.psi = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown component '{other}' (expected C, A, U, Psi)"
                    )))
                }
            }
        }
        Ok(t)
    }
}

impl From<Toggles> for String {
    fn from(t: Toggles) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Toggles {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Settings for a hedged attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeConfig {
    /// Evidence preservation factor in `[1, 2]`.
    pub gamma: f64,
    pub epsilon: f64,
    pub toggles: Toggles,
    /// Per-channel `(low, high)` input bounds; derived from the model's
    /// normalization when absent.
    pub zbeta_bounds: Option<Vec<(f32, f32)>>,
    pub target_layer: Option<usize>,
    /// Magnitude of the one-hot gradient seed.
    pub seed_scale: f32,
}

impl Default for HedgeConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            epsilon: DEFAULT_EPSILON,
            toggles: Toggles::ALL,
            zbeta_bounds: None,
            target_layer: None,
            seed_scale: 1.0,
        }
    }
}

impl HedgeConfig {
    pub fn with_gamma(gamma: f64) -> Result<Self> {
        let c = Self {
            gamma,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0..=2.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma must lie in [1, 2], got {}",
                self.gamma
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.seed_scale > 0.0) || !self.seed_scale.is_finite() {
            return Err(Error::InvalidArgument("seed scale must be positive".into()));
        }
        Ok(())
    }
}

/// Relevance sum recorded after one propagation step.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    /// Layer whose input the relevance is aligned to.
    pub layer: usize,
    pub sum: f64,
    /// Expected sum for hedged steps.
    pub expected: Option<f64>,
}

/// Output of [`attribute`].
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// Relevance at the network input, `1,C,H,W`.
    pub full: Tensor,
    /// Channel-summed `H,W` map.
    pub map: Tensor,
    pub logits: Vec<f32>,
    pub predicted: usize,
    pub target: usize,
    pub tau: f64,
    pub ledger: Vec<LedgerEntry>,
}

/// Applies the bounded-input rule at the first layer.
/// `bounds` holds one `(low, high)` pair per input channel (or feature).
pub fn zbeta_input_rule(
    layer: &LayerSpec,
    input: &Tensor,
    r: &Tensor,
    bounds: &[(f32, f32)],
    epsilon: f64,
) -> Result<Tensor> {
    let (channels, area) = match input.shape()[..] {
        [_, c, h, w] => (c, h * w),
        [_, f] => (f, 1),
        _ => return Err(Error::shape("zbeta rule", format!("unsupported input {:?}", input.shape()))),
    };
    if bounds.len() != channels {
        return Err(Error::InvalidArgument(format!(
            "{} bounds for {channels} input channels",
            bounds.len()
        )));
    }
    if let Some((c, (l, h))) = bounds.iter().enumerate().find(|(_, (l, h))| !(l < h)) {
        return Err(Error::InvalidArgument(format!(
            "bound for channel {c} has low {l} >= high {h}"
        )));
    }
    let bound_tensor = |pick: fn(&(f32, f32)) -> f32| {
        Tensor::from_fn(input.shape().to_vec(), |i| pick(&bounds[(i / area) % channels]))
    };
    let low = bound_tensor(|b| b.0);
    let high = bound_tensor(|b| b.1);
    layer.redistribute_zbeta(input, &low, &high, r, epsilon)
}

/// Gradient-hedged attribution of logit `target` back to the input.
pub fn attribute(model: &ModelGraph, input: &Tensor, target: usize, config: &HedgeConfig) -> Result<Attribution> {
    config.validate()?;
    let layers = model.layers();
    let target_layer = config.target_layer.unwrap_or(model.target_layer());
    if target_layer >= layers.len() {
        return Err(Error::InvalidArgument(format!("target layer {target_layer} out of range")));
    }
    let trace = forward_with_trace(model, input)?;
    let grads = target_gradients(model, &trace, target, target_layer, config.seed_scale)?;
    let initial = initial_contribution_map(&trace, &grads, target_layer).map_err(|e| e.at_layer(target_layer))?;
    let tau = initial.tau;
    let mut r = initial.relevance;
    let mut ledger = vec![LedgerEntry {
        layer: target_layer,
        sum: r.sum(),
        expected: None,
    }];

    for k in (1..target_layer).rev() {
        let layer = &layers[k];
        let x = &trace.inputs[k];
        let (next, expected) = if layer.is_weighted() {
            let step = HedgeStep {
                gamma: config.gamma,
                tau,
                epsilon: config.epsilon,
                toggles: config.toggles,
            };
            let gamma = if layer.is_pointwise_conv() { 1.0 } else { config.gamma };
            let modulated = modulate_sections(&r, gamma, tau).map_err(|e| e.at_layer(k))?;
            let out = hedge_layer(layer, x, &modulated.sections, &step).map_err(|e| e.at_layer(k))?;
            (out.relevance, Some(out.expected_sum))
        } else {
            let out = layer
                .redistribute_relevance(x, crate::layer::WeightTransform::Identity, &r, config.epsilon)
                .map_err(|e| e.at_layer(k))?;
            (out, None)
        };
        r = next;
        ledger.push(LedgerEntry {
            layer: k,
            sum: r.sum(),
            expected,
        });
    }

    if target_layer > 0 {
        let first = &layers[0];
        let x = &trace.inputs[0];
        r = if first.is_weighted() {
            let bounds = config.zbeta_bounds.clone().unwrap_or_else(|| model.input_bounds());
            zbeta_input_rule(first, x, &r, &bounds, config.epsilon).map_err(|e| e.at_layer(0))?
        } else {
            first
                .redistribute_relevance(x, crate::layer::WeightTransform::Identity, &r, config.epsilon)
                .map_err(|e| e.at_layer(0))?
        };
        ledger.push(LedgerEntry {
            layer: 0,
            sum: r.sum(),
            expected: None,
        });
    }
    r.ensure_finite("attribution map")?;
    let map = r.channel_sum()?;
    Ok(Attribution {
        full: r,
        map,
        logits: trace.logits().data().to_vec(),
        predicted: trace.predicted_class(),
        target,
        tau,
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggles_parse_and_display() {
        assert_eq!("C+A+U+Psi".parse::<Toggles>().unwrap(), Toggles::ALL);
        assert_eq!("all".parse::<Toggles>().unwrap(), Toggles::ALL);
        let cp: Toggles = "C,Psi".parse().unwrap();
        assert_eq!(cp, Toggles::ABLATION_ROWS[1]);
        assert_eq!(cp.to_string(), "C+Psi");
        assert!("C+X".parse::<Toggles>().is_err());
        for row in Toggles::ABLATION_ROWS {
            assert_eq!(row.to_string().parse::<Toggles>().unwrap(), row);
        }
    }

    #[test]
    fn gamma_range_enforced() {
        assert!(HedgeConfig::with_gamma(0.99).is_err());
        assert!(HedgeConfig::with_gamma(2.01).is_err());
        assert!(HedgeConfig::with_gamma(1.0).is_ok());
        assert!(HedgeConfig::with_gamma(2.0).is_ok());
    }

    #[test]
    fn zbeta_rejects_inverted_bounds() {
        let lin = LayerSpec::linear(Tensor::full(vec![1, 2], 1.0), None).unwrap();
        let x = Tensor::full(vec![1, 2], 0.5);
        let r = Tensor::full(vec![1, 1], 1.0);
        assert!(zbeta_input_rule(&lin, &x, &r, &[(0.0, 1.0), (1.0, 1.0)], 1e-9).is_err());
        let out = zbeta_input_rule(&lin, &x, &r, &[(0.0, 1.0), (0.0, 1.0)], 1e-9).unwrap();
        assert!((out.sum() - 1.0).abs() < 1e-6);
    }
}

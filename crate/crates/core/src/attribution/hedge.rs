//! Section modulation and the per-layer hedged propagation step
//! `R = C + A + U - Psi`.

use crate::error::{Error, Result};
use crate::layer::{LayerSpec, WeightTransform};
use crate::tensor::Tensor;

use super::Toggles;

/// Positive and negative parts of a relevance tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionPair {
    pub positive: Tensor,
    pub negative: Tensor,
}

impl SectionPair {
    /// Splits `r` into `max(r, 0)` and `min(r, 0)`.
    pub fn split(r: &Tensor) -> Self {
        Self {
            positive: r.map(|v| v.max(0.0)),
            negative: r.map(|v| v.min(0.0)),
        }
    }
}

/// Result of rescaling both sections to absolute mass `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulated {
    pub sections: SectionPair,
    /// `gamma * P' + N'`.
    pub relevance: Tensor,
    /// Set when the input had no negative mass and `N'` was zeroed.
    pub negative_empty: bool,
}

/// `P' = P * tau / sum P`, `N' = N * (-tau) / sum N`, `R = gamma * P' + N'`.
///
/// An input without negative mass yields `N' = 0` (and `sum R = gamma * tau`);
/// one without positive mass is an error.
pub fn modulate_sections(r: &Tensor, gamma: f64, tau: f64) -> Result<Modulated> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let SectionPair { positive, negative } = SectionPair::split(r);
    let sum_p = positive.sum();
    let sum_n = negative.sum();
    if sum_p <= 0.0 {
        return Err(Error::SectionDegenerate("relevance has no positive section".into()));
    }
    let p_scale = tau / sum_p;
    let positive = Tensor::from_fn(positive.shape().to_vec(), |i| (positive.data()[i] as f64 * p_scale) as f32);
    let negative_empty = sum_n >= 0.0;
    let negative = if negative_empty {
        log::warn!("relevance has no negative section; continuing with N' = 0");
        Tensor::zeros(negative.shape().to_vec())
    } else {
        let n_scale = -tau / sum_n;
        Tensor::from_fn(negative.shape().to_vec(), |i| (negative.data()[i] as f64 * n_scale) as f32)
    };
    let relevance = Tensor::from_fn(r.shape().to_vec(), |i| {
        (gamma * positive.data()[i] as f64 + negative.data()[i] as f64) as f32
    });
    Ok(Modulated {
        sections: SectionPair { positive, negative },
        relevance,
        negative_empty,
    })
}

/// Options for a single hedged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedgeStep {
    pub gamma: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub toggles: Toggles,
}

/// Per-component relevance produced by one hedged step.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeOutput {
    pub relevance: Tensor,
    /// Sum the relevance should have if every section finds a receiving neuron.
    pub expected_sum: f64,
    /// Effective gamma after the pointwise-convolution exception.
    pub gamma: f64,
}

/// One hedged propagation step through a conv or linear layer:
///
/// * `C = J(x, |w|, gamma * P') + J(x, |w|, N')`
/// * `A = J(alpha, |w|, P')` with `alpha = [x > 0]`
/// * `U = J(beta, |w|, N')` with `beta = [x <= 0]`
/// * `Psi = tau / count(alpha)` subtracted where `alpha = 1`
///
/// For 1x1 convolutions gamma is forced to 1 and `Psi` is skipped.
pub fn hedge_layer(layer: &LayerSpec, x: &Tensor, sections: &SectionPair, step: &HedgeStep) -> Result<HedgeOutput> {
    if !layer.is_weighted() {
        return Err(Error::Unsupported {
            kind: layer.name(),
            op: "hedge_layer",
        });
    }
    sections.positive.expect_same_shape(&sections.negative, "section pair")?;
    let pointwise = layer.is_pointwise_conv();
    let gamma = if pointwise { 1.0 } else { step.gamma };
    let toggles = step.toggles;
    let psi_on = toggles.psi && !pointwise;
    let eps = step.epsilon;
    let abs = WeightTransform::Absolute;

    let mut total = Tensor::zeros(x.shape().to_vec());
    let mut expected = 0.0;
    let sum_p = sections.positive.sum();
    let sum_n = sections.negative.sum();

    if toggles.c {
        let gp = sections.positive.scale(gamma as f32);
        let c_pos = layer.redistribute_relevance(x, abs, &gp, eps)?;
        let c_neg = layer.redistribute_relevance(x, abs, &sections.negative, eps)?;
        total = total.add(&c_pos)?.add(&c_neg)?;
        expected += gamma * sum_p + sum_n;
    }
    if toggles.a || toggles.u {
        let alpha = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        if toggles.a {
            total = total.add(&layer.redistribute_to_mask(&alpha, abs, &sections.positive, eps)?)?;
            expected += sum_p;
        }
        if toggles.u {
            let beta = alpha.map(|v| 1.0 - v);
            total = total.add(&layer.redistribute_to_mask(&beta, abs, &sections.negative, eps)?)?;
            expected += sum_n;
        }
    }
    if psi_on {
        let active = x.data().iter().filter(|&&v| v > 0.0).count();
        if active == 0 {
            return Err(Error::DeadLayer);
        }
        let shift = (step.tau / active as f64) as f32;
        for (r, &xv) in total.data_mut().iter_mut().zip(x.data()) {
            if xv > 0.0 {
                *r -= shift;
            }
        }
        expected -= step.tau;
    }
    Ok(HedgeOutput {
        relevance: total,
        expected_sum: expected,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn modulation_worked_example() {
        // P = [2, 0], N = [0, -4], tau = 1, gamma = 1.5
        let m = modulate_sections(&t(&[2], &[2.0, -4.0]), 1.5, 1.0).unwrap();
        assert_eq!(m.sections.positive.data(), &[1.0, 0.0]);
        assert_eq!(m.sections.negative.data(), &[0.0, -1.0]);
        assert_eq!(m.relevance.data(), &[1.5, -1.0]);
        assert!((m.relevance.sum() - 0.5).abs() < 1e-12);
        let m2 = modulate_sections(&t(&[2], &[2.0, -4.0]), 2.0, 1.0).unwrap();
        assert!((m2.relevance.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn modulation_degenerate_sections() {
        let m = modulate_sections(&t(&[3], &[1.0, 0.0, 3.0]), 1.25, 1.0).unwrap();
        assert!(m.negative_empty);
        assert!((m.relevance.sum() - 1.25).abs() < 1e-6);
        assert!(matches!(
            modulate_sections(&t(&[2], &[-1.0, 0.0]), 1.0, 1.0),
            Err(Error::SectionDegenerate(_))
        ));
    }

    #[test]
    fn dead_layer_when_no_activation() {
        let lin = LayerSpec::linear(t(&[1, 2], &[1.0, -1.0]), None).unwrap();
        let x = t(&[1, 2], &[-1.0, 0.0]);
        let sections = SectionPair {
            positive: t(&[1, 1], &[1.0]),
            negative: t(&[1, 1], &[0.0]),
        };
        let step = HedgeStep {
            gamma: 1.0,
            tau: 1.0,
            epsilon: 1e-9,
            toggles: Toggles::ALL,
        };
        assert!(matches!(hedge_layer(&lin, &x, &sections, &step), Err(Error::DeadLayer)));
    }
}

//! Library results checked against independent reference computations.

mod common;

use common::*;
use hedgegrad::attribution::{
    forward_with_trace, hedge_layer, initial_contribution_map, modulate_sections, target_gradients, zbeta_input_rule,
    HedgeStep, SectionPair,
};
use hedgegrad::model::{fold_batchnorm, BatchNormParams};
use hedgegrad::{
    attribute_baseline, BaselineMethod, LayerSpec, ModelGraph, Normalization, Tensor, Toggles, WeightTransform,
};
use rand::Rng;

const TRANSFORMS: [WeightTransform; 4] = [
    WeightTransform::Identity,
    WeightTransform::Absolute,
    WeightTransform::PositivePart,
    WeightTransform::NegativePart,
];

#[test]
fn conv3x3_forward_matches_dense_matrix() {
    let mut r = rng(1);
    let layer = rand_conv(&mut r, 1, 1, 3, 1, 0);
    let x = rand_tensor(&mut r, &[1, 1, 5, 5], -1.0, 1.0);
    let d = dense_unroll(&layer, &[1, 5, 5], WeightTransform::Identity);
    let want = d.forward(&x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let got = layer.forward(&x).unwrap();
    assert_eq!(got.shape(), &[1, 1, 3, 3]);
    assert!(max_abs_diff(got.data(), &want) < 1e-6);
}

#[test]
fn conv_forward_matches_dense_matrix_with_stride_and_padding() {
    let mut r = rng(2);
    for (ic, oc, k, s, p) in [(2, 3, 3, 1, 1), (4, 2, 3, 2, 1), (3, 4, 1, 1, 0), (2, 2, 2, 2, 0)] {
        let layer = rand_conv(&mut r, ic, oc, k, s, p);
        let x = rand_tensor(&mut r, &[2, ic, 6, 6], -1.0, 1.0);
        let d = dense_unroll(&layer, &[ic, 6, 6], WeightTransform::Identity);
        let want = per_item(&x, &x, |xi, _| d.forward(xi));
        assert!(max_abs_diff(layer.forward(&x).unwrap().data(), &want) < 1e-5);
    }
}

/// Conv redistribution, any transform, equals the dense-unrolled rule.
fn conv_redistribution_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ic = r.random_range(1..=4);
    let oc = r.random_range(1..=4);
    let k = [1, 2, 3][r.random_range(0..3)];
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..k);
    let (h, w) = (r.random_range(k.max(2)..=6), r.random_range(k.max(2)..=6));
    let n = r.random_range(1..=2);
    let layer = rand_conv(&mut r, ic, oc, k, stride, pad);
    let x = rand_tensor(&mut r, &[n, ic, h, w], -1.0, 1.0);
    let out_shape = layer.output_shape(x.shape()).unwrap();
    let rout = rand_tensor(&mut r, &out_shape, -1.0, 1.0);
    let t = TRANSFORMS[r.random_range(0..4)];
    let d = dense_unroll(&layer, &[ic, h, w], t);
    let got = layer.redistribute_relevance(&x, t, &rout, 1e-9).unwrap();
    let want = per_item(&x, &rout, |xi, ri| d.redistribute(xi, ri, 1e-9));
    let scale = want.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    max_abs_diff(got.data(), &want) / scale
}

#[test]
fn conv_redistribution_matches_dense_unroll() {
    for seed in 0..50 {
        let err = conv_redistribution_case(seed);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn mixed_mask_redistribution_matches_dense_unroll() {
    let mut r = rng(3);
    for _ in 0..30 {
        let layer = rand_conv(&mut r, 3, 2, 3, 1, 1);
        let mask = Tensor::from_fn(vec![1, 3, 5, 5], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
        let rout = rand_tensor(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
        let d = dense_unroll(&layer, &[3, 5, 5], WeightTransform::Absolute);
        let got = layer.redistribute_to_mask(&mask, WeightTransform::Absolute, &rout, 1e-9).unwrap();
        let want = per_item(&mask, &rout, |m, ri| d.redistribute(m, ri, 1e-9));
        let scale = want.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        assert!(max_abs_diff(got.data(), &want) / scale < 1e-5);
    }
}

#[test]
fn linear_redistribution_matches_dense() {
    let mut r = rng(4);
    for _ in 0..30 {
        let layer = rand_linear(&mut r, 7, 3);
        let x = rand_tensor(&mut r, &[2, 7], -1.0, 1.0);
        let rout = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
        for t in TRANSFORMS {
            let d = dense_unroll(&layer, &[7], t);
            let got = layer.redistribute_relevance(&x, t, &rout, 1e-9).unwrap();
            let want = per_item(&x, &rout, |xi, ri| d.redistribute(xi, ri, 1e-9));
            let scale = want.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            assert!(max_abs_diff(got.data(), &want) / scale < 1e-5);
        }
    }
}

/// Central difference of `sum(g * f(x))` at `x`.
fn fd_grad(x: &Tensor, g: &Tensor, h: f32, f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let dot = |t: Tensor| t.data().iter().zip(g.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
            (dot(f(&plus)) - dot(f(&minus))) / (2.0 * h as f64)
        })
        .collect()
}

/// An 8-element input for each layer kind, kept away from kinks.
fn fd_layer(r: &mut rand_chacha::ChaCha8Rng, kind: usize) -> (LayerSpec, Tensor) {
    let away = |r: &mut rand_chacha::ChaCha8Rng| {
        let v: f32 = r.random_range(0.05..1.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    };
    match kind {
        0 => (rand_linear(r, 8, 3), rand_tensor(r, &[1, 8], -1.0, 1.0)),
        1 => (rand_conv(r, 2, 3, 2, 1, 1), rand_tensor(r, &[1, 2, 2, 2], -1.0, 1.0)),
        2 => (LayerSpec::relu(), Tensor::from_fn(vec![1, 8], |_| away(r))),
        3 => {
            // distinct values spaced well beyond the step size
            let mut vals: Vec<f32> = (0..8).map(|i| i as f32 * 0.1).collect();
            for i in (1..8).rev() {
                vals.swap(i, r.random_range(0..=i));
            }
            (LayerSpec::max_pool(2, 2).unwrap(), Tensor::new(vec![1, 2, 2, 2], vals).unwrap())
        }
        4 => (LayerSpec::avg_pool(2, 2).unwrap(), rand_tensor(r, &[1, 2, 2, 2], -1.0, 1.0)),
        5 => (LayerSpec::global_avg_pool(), rand_tensor(r, &[1, 2, 2, 2], -1.0, 1.0)),
        _ => (LayerSpec::flatten(), rand_tensor(r, &[1, 2, 2, 2], -1.0, 1.0)),
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        for kind in 0..7 {
            let (layer, x) = fd_layer(&mut r, kind);
            assert_eq!(x.len(), 8);
            let fwd = layer.forward_traced(&x).unwrap();
            let g = rand_tensor(&mut r, fwd.output.shape(), -1.0, 1.0);
            let analytic = layer.backward_gradient(&x, &g, fwd.pool_indices.as_ref()).unwrap();
            let numeric = fd_grad(&x, &g, 1e-3, |t| layer.forward(t).unwrap());
            let err = max_abs_diff(analytic.data(), &numeric);
            assert!(err < 1e-2, "seed {seed} {}: {err}", layer.name());
        }
    }
}

#[test]
fn weight_gradients_match_finite_differences() {
    for seed in 0..100 {
        let mut r = rng(2000 + seed);
        for kind in 0..2 {
            let (layer, x) = fd_layer(&mut r, kind);
            let out = layer.forward(&x).unwrap();
            let g = rand_tensor(&mut r, out.shape(), -1.0, 1.0);
            let wg = layer.backward_weight_gradient(&x, &g).unwrap();
            let w = layer.weight().unwrap().clone();
            let b = layer.bias().unwrap().clone();
            let numeric_w = fd_grad(&w, &g, 1e-3, |wt| {
                layer.with_parameters(wt.clone(), Some(b.clone())).unwrap().forward(&x).unwrap()
            });
            let numeric_b = fd_grad(&b, &g, 1e-3, |bt| {
                layer.with_parameters(w.clone(), Some(bt.clone())).unwrap().forward(&x).unwrap()
            });
            assert!(max_abs_diff(wg.weight.data(), &numeric_w) < 1e-2, "seed {seed}");
            assert!(max_abs_diff(wg.bias.unwrap().data(), &numeric_b) < 1e-2, "seed {seed}");
        }
    }
}

#[test]
fn folded_batchnorm_matches_composition() {
    let mut r = rng(5);
    for _ in 0..20 {
        let conv = rand_conv(&mut r, 3, 4, 3, 1, 1);
        let bn = BatchNormParams {
            mean: (0..4).map(|_| r.random_range(-1.0..1.0)).collect(),
            var: (0..4).map(|_| r.random_range(0.1..2.0)).collect(),
            scale: (0..4).map(|_| r.random_range(-2.0..2.0)).collect(),
            shift: (0..4).map(|_| r.random_range(-1.0..1.0)).collect(),
            eps: 1e-5,
        };
        let x = rand_tensor(&mut r, &[1, 3, 5, 5], -1.0, 1.0);
        let y = conv.forward(&x).unwrap();
        let plane = 25;
        let want: Vec<f64> = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v as f64 - bn.mean[c] as f64) / (bn.var[c] as f64 + bn.eps as f64).sqrt() * bn.scale[c] as f64
                    + bn.shift[c] as f64
            })
            .collect();
        let folded = fold_batchnorm(&conv, &bn).unwrap();
        assert!(max_abs_diff(folded.forward(&x).unwrap().data(), &want) < 1e-5);
    }
}

fn small_cnn(r: &mut rand_chacha::ChaCha8Rng) -> ModelGraph {
    ModelGraph::new(
        vec![
            rand_conv(r, 2, 3, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2).unwrap(),
            rand_conv(r, 3, 4, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::global_avg_pool(),
            rand_linear(r, 4, 3),
        ],
        [1, 2, 6, 6],
        Normalization::identity(2),
    )
    .unwrap()
}

#[test]
fn logits_match_manual_composition() {
    let mut r = rng(6);
    let model = small_cnn(&mut r);
    let x = rand_tensor(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
    let layers = model.layers();
    // conv via dense matrices, everything else by hand
    let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let a = dense_unroll(&layers[0], &[2, 6, 6], WeightTransform::Identity).forward(&to64(&x));
    let a: Vec<f64> = a.into_iter().map(|v| v.max(0.0)).collect();
    let mut p = vec![f64::NEG_INFINITY; 3 * 9];
    for c in 0..3 {
        for y in 0..6 {
            for xx in 0..6 {
                let o = c * 9 + (y / 2) * 3 + xx / 2;
                p[o] = p[o].max(a[c * 36 + y * 6 + xx]);
            }
        }
    }
    let b = dense_unroll(&layers[3], &[3, 3, 3], WeightTransform::Identity).forward(&p);
    let b: Vec<f64> = b.into_iter().map(|v| v.max(0.0)).collect();
    let gap: Vec<f64> = (0..4).map(|c| b[c * 9..(c + 1) * 9].iter().sum::<f64>() / 9.0).collect();
    let logits = dense_unroll(&layers[6], &[4], WeightTransform::Identity).forward(&gap);
    let trace = forward_with_trace(&model, &x).unwrap();
    assert!(max_abs_diff(trace.logits().data(), &logits) < 1e-5);
    assert_eq!(trace.logits(), &model.forward(&x).unwrap());
    assert_eq!(trace.inputs.len(), layers.len() + 1);
}

#[test]
fn target_gradient_matches_finite_difference() {
    let mut r = rng(7);
    for _ in 0..10 {
        let model = small_cnn(&mut r);
        let x = rand_tensor(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
        let trace = forward_with_trace(&model, &x).unwrap();
        let tl = model.target_layer();
        let t = r.random_range(0..3);
        let grads = target_gradients(&model, &trace, t, tl, 1.0).unwrap();
        let at = &trace.inputs[tl];
        let head = |inp: &Tensor| {
            let mut v = inp.clone();
            for layer in &model.layers()[tl..] {
                v = layer.forward(&v).unwrap();
            }
            v
        };
        let onehot = Tensor::from_fn(vec![1, 3], |i| if i == t { 1.0 } else { 0.0 });
        let numeric = fd_grad(at, &onehot, 1e-3, head);
        assert!(max_abs_diff(grads.at(tl).unwrap().data(), &numeric) < 1e-2);
    }
}

#[test]
fn two_channel_initial_map_matches_manual() {
    let mut r = rng(8);
    let lin = rand_linear(&mut r, 2, 3);
    let model = ModelGraph::new(
        vec![LayerSpec::global_avg_pool(), lin.clone()],
        [1, 2, 2, 3],
        Normalization::identity(2),
    )
    .unwrap();
    let x = rand_tensor(&mut r, &[1, 2, 2, 3], 0.0, 1.0);
    let trace = forward_with_trace(&model, &x).unwrap();
    let grads = target_gradients(&model, &trace, 1, 0, 1.0).unwrap();
    let map = initial_contribution_map(&trace, &grads, 0).unwrap();
    // d y_1 / d x_{c,i} = w[1][c] / 6 everywhere, so the channel mean is w[1][c] / 6
    let w = lin.weight().unwrap().data();
    let raw: Vec<f64> = (0..12).map(|i| x.data()[i] as f64 * w[2 + i / 6] as f64 / 6.0).collect();
    let total: f64 = raw.iter().sum();
    let want: Vec<f64> = raw.iter().map(|v| v / total.abs()).collect();
    assert!(max_abs_diff(map.relevance.data(), &want) < 1e-6);
    assert!((map.tau - 1.0).abs() < 1e-6);
}

#[test]
fn random_modulation_hits_tau() {
    let mut r = rng(9);
    for _ in 0..50 {
        let t = rand_tensor(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
        let tau = r.random_range(0.1..3.0);
        let m = modulate_sections(&t, 1.5, tau).unwrap();
        assert!((m.sections.positive.sum() - tau).abs() < 1e-6 * tau.max(1.0));
        assert!((m.sections.negative.sum() + tau).abs() < 1e-6 * tau.max(1.0));
        let recon = t.data().iter().zip(SectionPair::split(&t).positive.data()).all(|(&v, &p)| p == v.max(0.0));
        assert!(recon);
    }
}

#[test]
fn hedge_dense_2x2_matches_scalar_recomputation() {
    // layer input x (2) -> output (2); weights w[j][i]
    let x = [0.5f64, 0.0];
    let w = [[1.0f64, -2.0], [-0.5, 3.0]];
    let pp = [0.75f64, 0.25];
    let nn = [0.0f64, -1.0];
    let (gamma, tau, eps) = (1.5f64, 1.0f64, 1e-9f64);
    let layer = LayerSpec::linear(
        Tensor::new(vec![2, 2], vec![1.0, -2.0, -0.5, 3.0]).unwrap(),
        Some(Tensor::new(vec![2], vec![0.3, -0.3]).unwrap()),
    )
    .unwrap();
    let sections = SectionPair {
        positive: Tensor::new(vec![1, 2], vec![0.75, 0.25]).unwrap(),
        negative: Tensor::new(vec![1, 2], vec![0.0, -1.0]).unwrap(),
    };
    let step = HedgeStep {
        gamma,
        tau,
        epsilon: eps,
        toggles: Toggles::ALL,
    };
    let got = hedge_layer(&layer, &Tensor::new(vec![1, 2], vec![0.5, 0.0]).unwrap(), &sections, &step).unwrap();

    let rule = |a: [f64; 2], r: [f64; 2]| -> [f64; 2] {
        let mut out = [0.0; 2];
        for j in 0..2 {
            let z = a[0] * w[j][0].abs() + a[1] * w[j][1].abs();
            let s = r[j] / stabilize(z, eps);
            for i in 0..2 {
                out[i] += a[i] * w[j][i].abs() * s;
            }
        }
        out
    };
    let alpha = [1.0, 0.0];
    let beta = [0.0, 1.0];
    let c1 = rule(x, [gamma * pp[0], gamma * pp[1]]);
    let c2 = rule(x, nn);
    let a = rule(alpha, pp);
    let u = rule(beta, nn);
    let psi = tau / 1.0;
    let want: Vec<f64> = (0..2)
        .map(|i| c1[i] + c2[i] + a[i] + u[i] - if x[i] > 0.0 { psi } else { 0.0 })
        .collect();
    assert!(max_abs_diff(got.relevance.data(), &want) < 1e-6);
    assert!((got.expected_sum - (gamma - 2.0) * tau).abs() < 1e-12);
}

#[test]
fn zbeta_dense_matches_manual() {
    let w = [[0.5f64, -1.0, 2.0], [-1.5, 0.25, 1.0]];
    let x = [0.2f64, -0.4, 0.9];
    let (l, h) = ([-1.0f64, -0.5, -2.0], [1.0f64, 1.5, 0.5]);
    let r = [0.7f64, -0.2];
    let eps = 1e-9;
    let layer = LayerSpec::linear(
        Tensor::new(vec![2, 3], w.iter().flatten().map(|&v| v as f32).collect()).unwrap(),
        None,
    )
    .unwrap();
    let got = zbeta_input_rule(
        &layer,
        &Tensor::new(vec![1, 3], x.iter().map(|&v| v as f32).collect()).unwrap(),
        &Tensor::new(vec![1, 2], r.iter().map(|&v| v as f32).collect()).unwrap(),
        &[(-1.0, 1.0), (-0.5, 1.5), (-2.0, 0.5)],
        eps,
    )
    .unwrap();
    let mut want = [0.0f64; 3];
    for j in 0..2 {
        let term = |i: usize| x[i] * w[j][i] - l[i] * w[j][i].max(0.0) - h[i] * w[j][i].min(0.0);
        let z: f64 = (0..3).map(term).sum();
        for (i, v) in want.iter_mut().enumerate() {
            *v += term(i) / stabilize(z, eps) * r[j];
        }
    }
    assert!(max_abs_diff(got.data(), &want) < 1e-6);
    assert!((got.sum() - (r[0] + r[1])).abs() < 1e-4);
}

#[test]
fn alpha_beta_small_net_matches_manual() {
    let w1 = [[1.0f64, -0.5], [0.5, 0.75], [-1.0, 0.25]];
    let w2 = [[0.5f64, -1.0, 2.0], [1.0, 0.5, -0.5]];
    let b1 = [0.1f64, -0.1, 0.2];
    let x = [0.8f64, 0.3];
    let flat = |rows: &[&[f64]]| rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect::<Vec<f32>>();
    let model = ModelGraph::with_target(
        vec![
            LayerSpec::flatten(),
            LayerSpec::linear(
                Tensor::new(vec![3, 2], flat(&[&w1[0], &w1[1], &w1[2]])).unwrap(),
                Some(Tensor::new(vec![3], b1.iter().map(|&v| v as f32).collect()).unwrap()),
            )
            .unwrap(),
            LayerSpec::relu(),
            LayerSpec::linear(Tensor::new(vec![2, 3], flat(&[&w2[0], &w2[1]])).unwrap(), None).unwrap(),
        ],
        [1, 2, 1, 1],
        Normalization::identity(2),
        0,
        None,
    )
    .unwrap();
    let input = Tensor::new(vec![1, 2, 1, 1], vec![0.8, 0.3]).unwrap();
    let out = attribute_baseline(
        &model,
        &input,
        0,
        BaselineMethod::LrpAlphaBeta { alpha: 2.0, beta: 1.0 },
        1.0,
        1e-9,
    )
    .unwrap();

    let eps = 1e-9;
    let a1: Vec<f64> = (0..3).map(|j| (b1[j] + w1[j][0] * x[0] + w1[j][1] * x[1]).max(0.0)).collect();
    let y0: f64 = (0..3).map(|i| w2[0][i] * a1[i]).sum();
    let ab = |inp: &[f64], w: &dyn Fn(usize, usize) -> f64, r: &[f64], n_in: usize| -> Vec<f64> {
        let mut out = vec![0.0; n_in];
        for (j, &rj) in r.iter().enumerate() {
            let zp: f64 = (0..n_in).map(|i| inp[i] * w(j, i).max(0.0)).sum();
            let zn: f64 = (0..n_in).map(|i| inp[i] * w(j, i).min(0.0)).sum();
            for i in 0..n_in {
                out[i] += 2.0 * inp[i] * w(j, i).max(0.0) * rj / stabilize(zp, eps)
                    - 1.0 * inp[i] * w(j, i).min(0.0) * rj / stabilize(zn, eps);
            }
        }
        out
    };
    let r2 = [y0, 0.0];
    let r1 = ab(&a1, &|j, i| w2[j][i], &r2, 3);
    let r0 = ab(&x, &|j, i| w1[j][i], &r1, 2);
    assert!(max_abs_diff(out.full.data(), &r0) < 1e-6);
}

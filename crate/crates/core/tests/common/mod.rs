#![allow(dead_code)]

use hedgegrad::eval::{generate_synthetic_dataset, train_toy_model, AnnotatedSample, SynthConfig, TrainConfig, TrainReport};
use hedgegrad::{LayerSpec, Tensor, WeightTransform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Post-ReLU style activations: about a third exactly zero.
pub fn rand_activations(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f32 = rng.random_range(-0.5..1.0);
        v.max(0.0)
    })
}

/// Post-ReLU activations `1,C,H,W` where every pixel has at least one zero
/// and at least one positive channel.
pub fn mixed_activations(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_activations(rng, shape);
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    for p in 0..plane {
        let off = rng.random_range(0..c);
        let on = (off + rng.random_range(1..c)) % c;
        t.data_mut()[off * plane + p] = 0.0;
        t.data_mut()[on * plane + p] = rng.random_range(0.1..1.0);
    }
    t
}

/// Whether each output with positive relevance sees an active input and
/// each output with negative relevance sees an inactive one.
pub fn sections_reachable(layer: &LayerSpec, x: &Tensor, rel: &Tensor) -> bool {
    let d = dense_unroll(layer, &x.shape()[1..], WeightTransform::Absolute);
    (0..d.rows).all(|j| {
        let links = |active: bool| (0..d.cols).any(|i| d.m[j * d.cols + i] > 0.0 && (x.data()[i] > 0.0) == active);
        let r = rel.data()[j];
        (r <= 0.0 || links(true)) && (r >= 0.0 || links(false))
    })
}

pub fn rand_conv(rng: &mut ChaCha8Rng, ic: usize, oc: usize, k: usize, stride: usize, pad: usize) -> LayerSpec {
    let w = rand_tensor(rng, &[oc, ic, k, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[oc], -0.5, 0.5);
    LayerSpec::conv2d(w, Some(b), stride, pad).unwrap()
}

pub fn rand_linear(rng: &mut ChaCha8Rng, i: usize, o: usize) -> LayerSpec {
    let w = rand_tensor(rng, &[o, i], -1.0, 1.0);
    let b = rand_tensor(rng, &[o], -0.5, 0.5);
    LayerSpec::linear(w, Some(b)).unwrap()
}

fn transform(t: WeightTransform, w: f64) -> f64 {
    match t {
        WeightTransform::Identity => w,
        WeightTransform::Absolute => w.abs(),
        WeightTransform::PositivePart => w.max(0.0),
        WeightTransform::NegativePart => w.min(0.0),
    }
}

/// Dense matrix `M[out][in]` of a conv or linear layer over one batch item,
/// built by visiting every (output, kernel tap) pair explicitly.
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub m: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn dense_unroll(layer: &LayerSpec, item_shape: &[usize], t: WeightTransform) -> Dense {
    let w = layer.weight().unwrap();
    let ws = w.shape();
    let wd: Vec<f64> = w.data().iter().map(|&v| transform(t, v as f64)).collect();
    let bias_of = |o: usize| layer.bias().map_or(0.0, |b| b.data()[o] as f64);
    match (ws.len(), item_shape) {
        (4, &[c, h, wi]) => {
            let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
            let (stride, pad) = match layer.kind() {
                hedgegrad::LayerKind::Conv2d { stride, padding, .. } => (*stride, *padding),
                _ => unreachable!(),
            };
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (wi + 2 * pad - kw) / stride + 1;
            let rows = oc * oh * ow;
            let cols = c * h * wi;
            let mut m = vec![0.0; rows * cols];
            let mut bias = vec![0.0; rows];
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = (o * oh + oy) * ow + ox;
                        bias[row] = bias_of(o);
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                        continue;
                                    }
                                    let col = (ci * h + iy as usize) * wi + ix as usize;
                                    m[row * cols + col] += wd[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
            Dense { rows, cols, m, bias }
        }
        (2, &[f]) => {
            let (o, i) = (ws[0], ws[1]);
            assert_eq!(i, f);
            Dense {
                rows: o,
                cols: i,
                m: wd,
                bias: (0..o).map(bias_of).collect(),
            }
        }
        _ => panic!("unsupported layer/shape for dense oracle"),
    }
}

impl Dense {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.bias[r] + (0..self.cols).map(|c| self.m[r * self.cols + c] * x[c]).sum::<f64>())
            .collect()
    }

    /// `R_i = a_i * sum_j M_ji r_j / stab(sum_i' a_i' M_ji')`.
    pub fn redistribute(&self, a: &[f64], r: &[f64], eps: f64) -> Vec<f64> {
        let s: Vec<f64> = (0..self.rows)
            .map(|j| {
                let z: f64 = (0..self.cols).map(|i| self.m[j * self.cols + i] * a[i]).sum();
                r[j] / stabilize(z, eps)
            })
            .collect();
        (0..self.cols)
            .map(|i| a[i] * (0..self.rows).map(|j| self.m[j * self.cols + i] * s[j]).sum::<f64>())
            .collect()
    }
}

pub fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Runs `f` over every batch item of an `N,...` tensor and concatenates.
pub fn per_item(x: &Tensor, r: &Tensor, f: impl Fn(&[f64], &[f64]) -> Vec<f64>) -> Vec<f64> {
    let n = x.shape()[0];
    let xi = x.len() / n;
    let ri = r.len() / n;
    let to64 = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
    (0..n)
        .flat_map(|b| f(&to64(&x.data()[b * xi..(b + 1) * xi]), &to64(&r.data()[b * ri..(b + 1) * ri])))
        .collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Training data and settings shared by the end-to-end tests.
pub fn toy_training_set() -> Vec<AnnotatedSample> {
    generate_synthetic_dataset(&SynthConfig::new(800, 32, 11).with_two_objects(0.3)).unwrap()
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    }
}

pub fn train_toy() -> TrainReport {
    train_toy_model(&toy_training_set(), 4, &toy_train_config()).unwrap()
}

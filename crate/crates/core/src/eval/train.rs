//! Small CNN presets and a minibatch SGD trainer for the synthetic shapes.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::model::{ModelGraph, Normalization};
use crate::tensor::Tensor;

use super::dataset::AnnotatedSample;

/// Architecture presets. Both end in global average pooling and a linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Three 3x3 conv blocks (8, 16, 32 channels), two max pools.
    TinyCnn,
    /// Two 3x3 conv blocks (8, 16 channels), one max pool.
    MicroCnn,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::TinyCnn => "tiny-cnn",
            Preset::MicroCnn => "micro-cnn",
        }
    }

    fn blocks(&self) -> &'static [(usize, bool)] {
        match self {
            Preset::TinyCnn => &[(8, true), (16, true), (32, false)],
            Preset::MicroCnn => &[(8, true), (16, false)],
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(Preset::TinyCnn),
            "micro-cnn" => Ok(Preset::MicroCnn),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset '{other}' (expected tiny-cnn or micro-cnn)"
            ))),
        }
    }
}

/// Builds a preset with He-normal weights and zero biases.
pub fn build_model(
    preset: Preset,
    input_shape: [usize; 4],
    classes: usize,
    normalization: Normalization,
    seed: u64,
) -> Result<ModelGraph> {
    if classes < 2 {
        return Err(Error::InvalidArgument("at least two classes required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: Vec<usize>, fan_in: usize| {
        let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
        Tensor::from_fn(shape, |_| dist.sample(&mut rng))
    };
    let mut layers = Vec::new();
    let mut channels = input_shape[1];
    for &(out, pool) in preset.blocks() {
        let w = he(vec![out, channels, 3, 3], channels * 9);
        layers.push(LayerSpec::conv2d(w, Some(Tensor::zeros(vec![out])), 1, 1)?);
        layers.push(LayerSpec::relu());
        if pool {
            layers.push(LayerSpec::max_pool(2, 2)?);
        }
        channels = out;
    }
    layers.push(LayerSpec::global_avg_pool());
    let head = he(vec![classes, channels], channels);
    layers.push(LayerSpec::linear(head, Some(Tensor::zeros(vec![classes])))?);
    ModelGraph::new(layers, input_shape, normalization)
}

/// Per-channel mean and standard deviation over a set of images.
pub fn channel_stats(samples: &[AnnotatedSample]) -> Result<Normalization> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples for normalization stats".into()))?;
    let (_, c, h, w) = first.image.dims4()?;
    let plane = h * w;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for s in samples {
        let d = s.image.data();
        for ch in 0..c {
            for &v in &d[ch * plane..(ch + 1) * plane] {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let n = (samples.len() * plane) as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std = sq
        .iter()
        .zip(&sum)
        .map(|(q, s)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-3)) as f32)
        .collect();
    Ok(Normalization { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of samples held out for the accuracy check.
    pub holdout_fraction: f64,
    /// Held-out accuracy required to accept a run.
    pub min_accuracy: f64,
    /// Total number of runs (each with a fresh seed) before giving up.
    pub max_attempts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::TinyCnn,
            epochs: 20,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            seed: 0,
            holdout_fraction: 0.2,
            min_accuracy: 0.9,
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: ModelGraph,
    /// Mean training loss of every epoch of the accepted run.
    pub epoch_losses: Vec<f64>,
    pub holdout_accuracy: f64,
    pub attempts: usize,
    /// Indices of the held-out samples.
    pub holdout: Vec<usize>,
}

/// Trains a preset on `samples` with softmax cross-entropy (multi-label
/// images get equal target mass per label). Runs are retried with a new
/// seed until the held-out top-1 accuracy reaches `min_accuracy`.
pub fn train_toy_model(samples: &[AnnotatedSample], classes: usize, cfg: &TrainConfig) -> Result<TrainReport> {
    validate(samples, classes, cfg)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_SALT));
    let n_hold = ((samples.len() as f64 * cfg.holdout_fraction).round() as usize).min(samples.len() - 1);
    let holdout: Vec<usize> = order[..n_hold].to_vec();
    let train: Vec<usize> = order[n_hold..].to_vec();
    let norm = channel_stats(&train.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>())?;
    let (_, c, h, w) = samples[0].image.dims4()?;

    let mut last_losses = Vec::new();
    let mut last_acc = 0.0;
    for attempt in 0..cfg.max_attempts.max(1) {
        let seed = cfg.seed.wrapping_add(7919 * attempt as u64);
        let model = build_model(cfg.preset, [1, c, h, w], classes, norm.clone(), seed)?;
        let (model, losses) = sgd(model, samples, &train, classes, cfg, seed)?;
        let eval_set = if holdout.is_empty() { &train } else { &holdout };
        let acc = accuracy(&model, samples, eval_set)?;
        log::info!(
            "attempt {} seed {seed}: final loss {:.4}, held-out accuracy {:.3}",
            attempt + 1,
            losses.last().copied().unwrap_or(f64::NAN),
            acc
        );
        if acc >= cfg.min_accuracy {
            return Ok(TrainReport {
                model,
                epoch_losses: losses,
                holdout_accuracy: acc,
                attempts: attempt + 1,
                holdout,
            });
        }
        last_losses = losses;
        last_acc = acc;
    }
    Err(Error::TrainingFailure {
        message: format!(
            "held-out accuracy {last_acc:.3} below {} after {} attempts",
            cfg.min_accuracy, cfg.max_attempts
        ),
        losses: last_losses,
    })
}

const SPLIT_SALT: u64 = 0x005e_ed0f_5911_7000;

fn validate(samples: &[AnnotatedSample], classes: usize, cfg: &TrainConfig) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two samples".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("batch size and epochs must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::InvalidArgument("holdout fraction must lie in [0, 1)".into()));
    }
    if !(cfg.learning_rate >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidArgument("learning rate must be >= 0 and momentum in [0, 1)".into()));
    }
    let shape = samples[0].image.shape();
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != shape {
            return Err(Error::shape("training set", format!("sample {i} has shape {:?}", s.image.shape())));
        }
        if s.labels.is_empty() || s.labels.iter().any(|&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("sample {i} has labels outside 0..{classes}")));
        }
    }
    Ok(())
}

/// Stacks sample images into one normalized `N,C,H,W` batch.
fn batch_input(model: &ModelGraph, samples: &[AnnotatedSample], idx: &[usize]) -> Result<Tensor> {
    let shape = samples[idx[0]].image.shape();
    let mut data = Vec::with_capacity(idx.len() * samples[idx[0]].image.len());
    for &i in idx {
        data.extend_from_slice(samples[i].image.data());
    }
    model.normalize(&Tensor::new(vec![idx.len(), shape[1], shape[2], shape[3]], data)?)
}

/// Top-1 accuracy: a prediction counts when it is one of the sample's labels.
pub fn accuracy(model: &ModelGraph, samples: &[AnnotatedSample], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty set".into()));
    }
    let k = model.num_classes();
    let mut correct = 0usize;
    for chunk in idx.chunks(64) {
        let logits = model.forward(&batch_input(model, samples, chunk)?)?;
        for (row, &i) in logits.data().chunks(k).zip(chunk) {
            if samples[i].labels.contains(&super::argmax(row)) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

fn sgd(
    model: ModelGraph,
    samples: &[AnnotatedSample],
    train: &[usize],
    classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelGraph, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut layers: Vec<LayerSpec> = model.layers().to_vec();
    let mut velocity: Vec<Option<(Vec<f32>, Vec<f32>)>> = layers
        .iter()
        .map(|l| {
            l.weight()
                .map(|w| (vec![0.0; w.len()], vec![0.0; l.bias().map_or(0, Tensor::len)]))
        })
        .collect();
    let mut order = train.to_vec();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let current = model.with_layers(layers.clone())?;
            let x = batch_input(&current, samples, batch)?;
            let (loss, grads) = loss_and_gradients(&current, &x, samples, batch, classes)?;
            total += loss * batch.len() as f64;
            for (k, g) in grads.into_iter().enumerate() {
                let (Some((dw, db)), Some((vw, vb))) = (g, velocity[k].as_mut()) else {
                    continue;
                };
                let layer = &layers[k];
                let mut w = layer.weight().unwrap().clone();
                step(w.data_mut(), &dw, vw, cfg);
                let b = match layer.bias() {
                    Some(b) => {
                        let mut b = b.clone();
                        let no_decay = TrainConfig {
                            weight_decay: 0.0,
                            ..cfg.clone()
                        };
                        step(b.data_mut(), &db, vb, &no_decay);
                        Some(b)
                    }
                    None => None,
                };
                layers[k] = layer.with_parameters(w, b)?;
            }
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingFailure {
                message: "training loss diverged".into(),
                losses,
            });
        }
        losses.push(mean);
    }
    Ok((model.with_layers(layers)?, losses))
}

fn step(param: &mut [f32], grad: &[f32], vel: &mut [f32], cfg: &TrainConfig) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= cfg.learning_rate * *v;
    }
}

type LayerGrad = Option<(Vec<f32>, Vec<f32>)>;

/// Mean soft-target cross-entropy over the batch and the parameter gradients.
fn loss_and_gradients(
    model: &ModelGraph,
    x: &Tensor,
    samples: &[AnnotatedSample],
    batch: &[usize],
    classes: usize,
) -> Result<(f64, Vec<LayerGrad>)> {
    let layers = model.layers();
    let mut inputs = Vec::with_capacity(layers.len() + 1);
    let mut pools = Vec::with_capacity(layers.len());
    inputs.push(x.clone());
    for (k, layer) in layers.iter().enumerate() {
        let f = layer.forward_traced(&inputs[k]).map_err(|e| e.at_layer(k))?;
        inputs.push(f.output);
        pools.push(f.pool_indices);
    }
    let logits = inputs.last().unwrap();
    let n = batch.len();
    let mut g = vec![0.0f32; n * classes];
    let mut loss = 0.0f64;
    for (b, &i) in batch.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let labels = &samples[i].labels;
        let share = 1.0 / labels.len() as f64;
        for c in 0..classes {
            let p = exps[c] / z;
            let t = if labels.contains(&c) { share } else { 0.0 };
            if t > 0.0 {
                loss -= t * (p.max(1e-12)).ln();
            }
            g[b * classes + c] = ((p - t) / n as f64) as f32;
        }
    }
    let mut grad = Tensor::new(logits.shape().to_vec(), g)?;
    let mut out = vec![None; layers.len()];
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        if layer.is_weighted() {
            let wg = layer.backward_weight_gradient(&inputs[k], &grad)?;
            out[k] = Some((wg.weight.into_data(), wg.bias.map(Tensor::into_data).unwrap_or_default()));
        }
        if k > 0 {
            grad = layer.backward_gradient(&inputs[k], &grad, pools[k].as_ref())?;
        }
    }
    Ok((loss / n as f64, out))
}

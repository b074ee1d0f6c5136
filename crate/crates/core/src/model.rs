//! Sequential model graphs, the JSON manifest + `GHT1` blob format,
//! batch-norm folding, and cascading weight randomization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layer::{LayerKind, LayerSpec};
use crate::tensor::{ght_byte_len, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

/// Per-channel statistics applied to `[0, 1]` images before inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// A validated, immutable sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 4],
    num_classes: usize,
    class_names: Option<Vec<String>>,
    normalization: Normalization,
    target_layer: usize,
}

impl ModelGraph {
    /// Builds and validates a graph. The target layer defaults to the first
    /// global average pooling layer.
    pub fn new(layers: Vec<LayerSpec>, input_shape: [usize; 4], normalization: Normalization) -> Result<Self> {
        let target = default_target_layer(&layers)?;
        Self::with_target(layers, input_shape, normalization, target, None)
    }

    pub fn with_target(
        layers: Vec<LayerSpec>,
        input_shape: [usize; 4],
        normalization: Normalization,
        target_layer: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        if target_layer >= layers.len() {
            return Err(Error::InvalidArgument(format!(
                "target layer {target_layer} out of range for {} layers",
                layers.len()
            )));
        }
        let channels = input_shape[1];
        if normalization.mean.len() != channels || normalization.std.len() != channels {
            return Err(Error::InvalidArgument(format!(
                "normalization stats must have {channels} entries"
            )));
        }
        if normalization.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument("normalization std must be positive".into()));
        }
        let out = compose_shapes(&layers, &input_shape)?;
        let num_classes = match out[..] {
            [_, k] => k,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "final layer must produce N,classes logits, got {out:?}"
                )))
            }
        };
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::InvalidArgument(format!(
                    "{} class names for {num_classes} classes",
                    names.len()
                )));
            }
        }
        for (k, layer) in layers.iter().enumerate() {
            for t in layer.weight().into_iter().chain(layer.bias()) {
                t.ensure_finite(&format!("layer {k} parameters"))?;
            }
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            class_names,
            normalization,
            target_layer,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn target_layer(&self) -> usize {
        self.target_layer
    }

    pub fn weighted_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&k| self.layers[k].is_weighted()).collect()
    }

    /// Replaces the layer list, keeping metadata, and re-validates.
    pub fn with_layers(&self, layers: Vec<LayerSpec>) -> Result<Self> {
        Self::with_target(
            layers,
            self.input_shape,
            self.normalization.clone(),
            self.target_layer,
            self.class_names.clone(),
        )
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x).map_err(|e| e.at_layer(k))?;
        }
        Ok(x)
    }

    /// Maps a `[0, 1]` image tensor `N,C,H,W` through the normalization stats.
    pub fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = image.dims4()?;
        if c != self.input_shape[1] {
            return Err(Error::shape(
                "normalize",
                format!("image has {c} channels, model expects {}", self.input_shape[1]),
            ));
        }
        let plane = h * w;
        let mut data = image.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let (m, s) = (self.normalization.mean[ch], self.normalization.std[ch]);
                for v in &mut data[(b * c + ch) * plane..][..plane] {
                    *v = (*v - m) / s;
                }
            }
        }
        Tensor::new(image.shape().to_vec(), data)
    }

    /// Per-channel input-domain bounds: the image range `[0, 1]` after normalization.
    pub fn input_bounds(&self) -> Vec<(f32, f32)> {
        self.normalization
            .mean
            .iter()
            .zip(&self.normalization.std)
            .map(|(&m, &s)| ((0.0 - m) / s, (1.0 - m) / s))
            .collect()
    }

    /// SHA-256 over the manifest and all parameter blobs.
    pub fn content_hash(&self) -> String {
        let (manifest, blobs) = self.to_manifest();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&manifest).expect("manifest serializes"));
        for (_, t) in blobs {
            h.update(t.to_ght_bytes());
        }
        hex_digest(h)
    }

    /// Manifest plus `(file name, tensor)` blobs in layer order.
    pub fn to_manifest(&self) -> (ModelManifest, Vec<(String, Tensor)>) {
        let mut blobs = Vec::new();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                let mut params = |layer: &LayerSpec| {
                    let w = layer.weight().expect("weighted layer").clone();
                    let wname = format!("layer{k}_w.ght");
                    let weights = BlobRef {
                        file: wname.clone(),
                        bytes: ght_byte_len(w.shape()) as u64,
                    };
                    blobs.push((wname, w));
                    let bias = layer.bias().map(|b| {
                        let bname = format!("layer{k}_b.ght");
                        let r = BlobRef {
                            file: bname.clone(),
                            bytes: ght_byte_len(b.shape()) as u64,
                        };
                        blobs.push((bname, b.clone()));
                        r
                    });
                    (weights, bias)
                };
                match *layer.kind() {
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    } => {
                        let (weights, bias) = params(layer);
                        LayerDescriptor::Conv2d {
                            in_channels,
                            out_channels,
                            kernel,
                            stride,
                            padding,
                            weights: weights.file,
                            bias: bias.as_ref().map(|b| b.file.clone()),
                            weights_bytes: Some(weights.bytes),
                            bias_bytes: bias.map(|b| b.bytes),
                        }
                    }
                    LayerKind::Linear {
                        in_features,
                        out_features,
                    } => {
                        let (weights, bias) = params(layer);
                        LayerDescriptor::Linear {
                            in_features,
                            out_features,
                            weights: weights.file,
                            bias: bias.as_ref().map(|b| b.file.clone()),
                            weights_bytes: Some(weights.bytes),
                            bias_bytes: bias.map(|b| b.bytes),
                        }
                    }
                    LayerKind::Relu => LayerDescriptor::Relu,
                    LayerKind::MaxPool2d { kernel, stride } => LayerDescriptor::MaxPool2d { kernel, stride },
                    LayerKind::AvgPool2d { kernel, stride } => LayerDescriptor::AvgPool2d { kernel, stride },
                    LayerKind::GlobalAvgPool => LayerDescriptor::GlobalAvgPool,
                    LayerKind::Flatten => LayerDescriptor::Flatten,
                }
            })
            .collect();
        let manifest = ModelManifest {
            version: MANIFEST_VERSION,
            input_shape: self.input_shape,
            normalization: self.normalization.clone(),
            class_names: self.class_names.clone(),
            layers,
            target_layer: self.target_layer,
        };
        (manifest, blobs)
    }
}

struct BlobRef {
    file: String,
    bytes: u64,
}

/// On-disk description of a model; parameters live in sibling `GHT1` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: u32,
    pub input_shape: [usize; 4],
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub layers: Vec<LayerDescriptor>,
    pub target_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerDescriptor {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        weights: String,
        bias: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights_bytes: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_bytes: Option<u64>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        weights: String,
        bias: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights_bytes: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_bytes: Option<u64>,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { kernel: usize, stride: usize },
    #[serde(rename = "globalavgpool")]
    GlobalAvgPool,
    Flatten,
    /// Folded into the preceding conv or linear layer at load time.
    #[serde(rename = "batchnorm")]
    BatchNorm(BatchNormParams),
}

fn one() -> usize {
    1
}

/// Inference-time batch-norm statistics and affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    #[serde(default)]
    pub eps: f32,
}

/// Folds `conv -> batchnorm` into a single layer:
/// `w' = w * scale / sqrt(var + eps)`, `b' = (b - mean) * scale / sqrt(var + eps) + shift`.
pub fn fold_batchnorm(layer: &LayerSpec, bn: &BatchNormParams) -> Result<LayerSpec> {
    let weight = layer.weight().ok_or(Error::Unsupported {
        kind: layer.name(),
        op: "fold_batchnorm",
    })?;
    let channels = weight.shape()[0];
    for (name, v) in [("mean", &bn.mean), ("var", &bn.var), ("scale", &bn.scale), ("shift", &bn.shift)] {
        if v.len() != channels {
            return Err(Error::InvalidArgument(format!(
                "batchnorm {name} has {} channels, layer has {channels} outputs",
                v.len()
            )));
        }
    }
    let factors = bn
        .var
        .iter()
        .zip(&bn.scale)
        .map(|(&var, &scale)| {
            let denom = var as f64 + bn.eps as f64;
            if denom <= 0.0 || !denom.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "batchnorm var + eps must be positive, got {denom}"
                )));
            }
            Ok(scale as f64 / denom.sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let per_out = weight.len() / channels;
    let w = Tensor::from_fn(weight.shape().to_vec(), |i| {
        (weight.data()[i] as f64 * factors[i / per_out]) as f32
    });
    let b = Tensor::from_fn(vec![channels], |c| {
        let b0 = layer.bias().map_or(0.0, |b| b.data()[c]) as f64;
        ((b0 - bn.mean[c] as f64) * factors[c] + bn.shift[c] as f64) as f32
    });
    layer.with_parameters(w, Some(b))
}

/// Re-draws the selected layers' parameters i.i.d. from a normal distribution
/// with each tensor's empirical mean and standard deviation. Each layer gets
/// its own stream derived from `(seed, layer index)`, so cascades are nested.
pub fn randomize_layers(model: &ModelGraph, indices: &[usize], seed: u64) -> Result<ModelGraph> {
    let mut layers = model.layers.clone();
    for &k in indices {
        let layer = layers
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("layer index {k} out of range")))?;
        if !layer.is_weighted() {
            return Err(Error::InvalidArgument(format!(
                "layer {k} ({}) has no weights to randomize",
                layer.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, k));
        let w = redraw(layer.weight().unwrap(), &mut rng);
        let b = layer.bias().map(|b| redraw(b, &mut rng));
        layers[k] = layer.with_parameters(w, b)?;
    }
    model.with_layers(layers)
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (layer as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn redraw(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let n = t.len() as f64;
    let mean = t.sum() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let normal = Normal::new(mean, var.sqrt()).expect("finite moments");
    Tensor::from_fn(t.shape().to_vec(), |_| normal.sample(rng) as f32)
}

/// Writes the manifest and one `GHT1` blob per parameter tensor.
/// A directory path gets `model.json` inside it. Returns the manifest path.
pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() || path.extension().is_none() {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        path.join("model.json")
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let (manifest, blobs) = model.to_manifest();
    for (name, t) in &blobs {
        t.write_ght(dir.join(name))?;
    }
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Loads and validates a model. Batch-norm entries are folded into the
/// preceding layer and `target_layer` is remapped accordingly.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<ModelGraph> {
    let manifest_path = manifest_path.as_ref();
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join("model.json")
    } else {
        manifest_path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        field: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    graph_from_manifest(&manifest, |file, declared| {
        let p = dir.join(file);
        let bytes = fs::read(&p).map_err(|e| Error::Blob {
            path: p.clone(),
            message: e.to_string(),
        })?;
        if let Some(n) = declared {
            if bytes.len() as u64 != n {
                return Err(Error::Blob {
                    path: p,
                    message: format!("declared {n} bytes, found {}", bytes.len()),
                });
            }
        }
        Tensor::from_ght_bytes(&bytes).map_err(|e| Error::Blob {
            path: p,
            message: e.to_string(),
        })
    })
}

/// Builds a graph from a parsed manifest, resolving blobs through `fetch`.
pub fn graph_from_manifest(
    manifest: &ModelManifest,
    mut fetch: impl FnMut(&str, Option<u64>) -> Result<Tensor>,
) -> Result<ModelGraph> {
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest {
            field: "version".into(),
            message: format!("unsupported version {}", manifest.version),
        });
    }
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut remap = Vec::with_capacity(manifest.layers.len());
    for (k, desc) in manifest.layers.iter().enumerate() {
        let field = |name: &str| format!("layers[{k}].{name}");
        let wrap = |e: Error| match e {
            e @ (Error::Blob { .. } | Error::Manifest { .. }) => e,
            e => Error::Manifest {
                field: field("weights"),
                message: e.to_string(),
            },
        };
        let layer = match desc {
            LayerDescriptor::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weights,
                bias,
                weights_bytes,
                bias_bytes,
            } => {
                let w = fetch(weights, *weights_bytes)?;
                if w.shape() != [*out_channels, *in_channels, kernel[0], kernel[1]] {
                    return Err(Error::Manifest {
                        field: field("weights"),
                        message: format!(
                            "weight shape {:?} disagrees with declared {out_channels}x{in_channels}x{}x{}",
                            w.shape(),
                            kernel[0],
                            kernel[1]
                        ),
                    });
                }
                let b = bias.as_deref().map(|f| fetch(f, *bias_bytes)).transpose()?;
                LayerSpec::conv2d(w, b, *stride, *padding).map_err(wrap)?
            }
            LayerDescriptor::Linear {
                in_features,
                out_features,
                weights,
                bias,
                weights_bytes,
                bias_bytes,
            } => {
                let w = fetch(weights, *weights_bytes)?;
                if w.shape() != [*out_features, *in_features] {
                    return Err(Error::Manifest {
                        field: field("weights"),
                        message: format!(
                            "weight shape {:?} disagrees with declared {out_features}x{in_features}",
                            w.shape()
                        ),
                    });
                }
                let b = bias.as_deref().map(|f| fetch(f, *bias_bytes)).transpose()?;
                LayerSpec::linear(w, b).map_err(wrap)?
            }
            LayerDescriptor::Relu => LayerSpec::relu(),
            LayerDescriptor::MaxPool2d { kernel, stride } => LayerSpec::max_pool(*kernel, *stride).map_err(wrap)?,
            LayerDescriptor::AvgPool2d { kernel, stride } => LayerSpec::avg_pool(*kernel, *stride).map_err(wrap)?,
            LayerDescriptor::GlobalAvgPool => LayerSpec::global_avg_pool(),
            LayerDescriptor::Flatten => LayerSpec::flatten(),
            LayerDescriptor::BatchNorm(bn) => {
                let prev = layers.pop().filter(|l| l.is_weighted()).ok_or_else(|| Error::Manifest {
                    field: format!("layers[{k}]"),
                    message: "batchnorm must follow a conv2d or linear layer".into(),
                })?;
                let folded = fold_batchnorm(&prev, bn).map_err(|e| Error::Manifest {
                    field: format!("layers[{k}]"),
                    message: e.to_string(),
                })?;
                layers.push(folded);
                remap.push(layers.len() - 1);
                continue;
            }
        };
        layers.push(layer);
        remap.push(layers.len() - 1);
    }
    let target = *remap.get(manifest.target_layer).ok_or_else(|| Error::Manifest {
        field: "target_layer".into(),
        message: format!("index {} out of range", manifest.target_layer),
    })?;
    ModelGraph::with_target(
        layers,
        manifest.input_shape,
        manifest.normalization.clone(),
        target,
        manifest.class_names.clone(),
    )
}

/// Propagates shapes through the layers, naming the offending pair on failure.
fn compose_shapes(layers: &[LayerSpec], input_shape: &[usize; 4]) -> Result<Vec<usize>> {
    let mut shape = input_shape.to_vec();
    for (k, layer) in layers.iter().enumerate() {
        shape = layer.output_shape(&shape).map_err(|e| {
            if k == 0 {
                Error::Manifest {
                    field: "input_shape".into(),
                    message: format!("layer 0 ({}) rejects the input: {e}", layer.name()),
                }
            } else {
                Error::Composition {
                    first: k - 1,
                    second: k,
                    message: format!("{} -> {}: {e}", layers[k - 1].name(), layer.name()),
                }
            }
        })?;
    }
    Ok(shape)
}

fn default_target_layer(layers: &[LayerSpec]) -> Result<usize> {
    layers
        .iter()
        .position(|l| matches!(l.kind(), LayerKind::GlobalAvgPool))
        .or_else(|| layers.iter().position(|l| matches!(l.kind(), LayerKind::Flatten)))
        .ok_or_else(|| {
            Error::InvalidArgument("no global pooling or flatten layer to serve as the target layer".into())
        })
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a tensor's `GHT1` encoding.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    h.update(t.to_ght_bytes());
    hex_digest(h)
}

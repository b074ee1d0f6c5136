//! Layer definitions and the per-layer numeric operations: forward pass,
//! input and weight gradients, and proportional relevance redistribution.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom, Scalar};
use crate::tensor::Tensor;

/// Default denominator stabilizer for relevance redistribution.
pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// One layer of a sequential network. Weights are reference counted so
/// derived graphs can share untouched layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    kind: LayerKind,
    weight: Option<Arc<Tensor>>,
    bias: Option<Arc<Tensor>>,
}

/// How weights are transformed before redistribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightTransform {
    Identity,
    Absolute,
    PositivePart,
    NegativePart,
}

impl WeightTransform {
    #[inline]
    pub fn apply_scalar(self, w: f32) -> f32 {
        match self {
            WeightTransform::Identity => w,
            WeightTransform::Absolute => w.abs(),
            WeightTransform::PositivePart => w.max(0.0),
            WeightTransform::NegativePart => w.min(0.0),
        }
    }

    pub fn apply(self, w: &Tensor) -> Tensor {
        w.map(|v| self.apply_scalar(v))
    }
}

/// Argmax positions recorded by a max-pooling forward pass, one flat input
/// index per output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    indices: Vec<usize>,
}

impl PoolIndices {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

/// Output of a forward pass together with any routing state it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerForward {
    pub output: Tensor,
    pub pool_indices: Option<PoolIndices>,
}

/// Gradients with respect to a layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGradient {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// `z + sign(z) * eps`, with `z == 0` treated as positive.
#[inline]
pub fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

impl LayerSpec {
    /// Convolution with weight `OutC x InC x kH x kW` and optional bias `OutC`.
    pub fn conv2d(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let (oc, ic, kh, kw) = weight
            .dims4()
            .map_err(|_| Error::shape("conv2d", format!("weight must be rank 4, got {:?}", weight.shape())))?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        check_bias(&bias, oc, "conv2d")?;
        Ok(Self {
            kind: LayerKind::Conv2d {
                in_channels: ic,
                out_channels: oc,
                kernel: [kh, kw],
                stride,
                padding,
            },
            weight: Some(Arc::new(weight)),
            bias: bias.map(Arc::new),
        })
    }

    /// Dense layer with weight `OutF x InF` and optional bias `OutF`.
    pub fn linear(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (of, inf) = weight
            .dims2()
            .map_err(|_| Error::shape("linear", format!("weight must be rank 2, got {:?}", weight.shape())))?;
        check_bias(&bias, of, "linear")?;
        Ok(Self {
            kind: LayerKind::Linear {
                in_features: inf,
                out_features: of,
            },
            weight: Some(Arc::new(weight)),
            bias: bias.map(Arc::new),
        })
    }

    pub fn relu() -> Self {
        Self::parameterless(LayerKind::Relu)
    }

    pub fn max_pool(kernel: usize, stride: usize) -> Result<Self> {
        check_pool(kernel, stride)?;
        Ok(Self::parameterless(LayerKind::MaxPool2d { kernel, stride }))
    }

    pub fn avg_pool(kernel: usize, stride: usize) -> Result<Self> {
        check_pool(kernel, stride)?;
        Ok(Self::parameterless(LayerKind::AvgPool2d { kernel, stride }))
    }

    pub fn global_avg_pool() -> Self {
        Self::parameterless(LayerKind::GlobalAvgPool)
    }

    pub fn flatten() -> Self {
        Self::parameterless(LayerKind::Flatten)
    }

    fn parameterless(kind: LayerKind) -> Self {
        Self {
            kind,
            weight: None,
            bias: None,
        }
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_deref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_deref()
    }

    pub fn weight_arc(&self) -> Option<&Arc<Tensor>> {
        self.weight.as_ref()
    }

    pub fn bias_arc(&self) -> Option<&Arc<Tensor>> {
        self.bias.as_ref()
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    /// True for 1x1 convolutions, which only remix channels.
    pub fn is_pointwise_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { kernel: [1, 1], .. })
    }

    /// Same layer with new parameters of identical shape.
    pub fn with_parameters(&self, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let old = self
            .weight()
            .ok_or(Error::Unsupported {
                kind: self.name(),
                op: "with_parameters",
            })?;
        old.expect_same_shape(&weight, self.name())?;
        match (self.bias(), &bias) {
            (Some(b), Some(nb)) => b.expect_same_shape(nb, self.name())?,
            (None, None) => {}
            (_, Some(nb)) => check_bias(&Some(nb.clone()), weight.shape()[0], self.name())?,
            (Some(_), None) => {}
        }
        Ok(Self {
            kind: self.kind,
            weight: Some(Arc::new(weight)),
            bias: bias.map(Arc::new),
        })
    }

    fn conv_geom(&self, input: &[usize]) -> Result<ConvGeom> {
        let LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.kind
        else {
            unreachable!("conv_geom on non-conv layer")
        };
        let [n, c, h, w] = input[..] else {
            return Err(self.shape_err(format!("expected N,C,H,W input, got {input:?}")));
        };
        if c != in_channels {
            return Err(self.shape_err(format!(
                "input channel dimension is {c}, layer expects {in_channels}"
            )));
        }
        ConvGeom::new(n, c, h, w, out_channels, kernel[0], kernel[1], stride, padding).ok_or_else(|| {
            self.shape_err(format!(
                "kernel {}x{} does not fit input {h}x{w} with padding {padding}",
                kernel[0], kernel[1]
            ))
        })
    }

    fn linear_dims(&self, input: &[usize]) -> Result<(usize, usize, usize)> {
        let LayerKind::Linear {
            in_features,
            out_features,
        } = self.kind
        else {
            unreachable!("linear_dims on non-linear layer")
        };
        let [n, f] = input[..] else {
            return Err(self.shape_err(format!("expected N,F input, got {input:?}")));
        };
        if f != in_features {
            return Err(self.shape_err(format!(
                "input feature dimension is {f}, layer expects {in_features}"
            )));
        }
        Ok((n, in_features, out_features))
    }

    fn pool_geom(&self, input: &[usize]) -> Result<PoolGeom> {
        let [n, c, h, w] = input[..] else {
            return Err(self.shape_err(format!("expected N,C,H,W input, got {input:?}")));
        };
        let (kernel, stride) = match self.kind {
            LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => (kernel, stride),
            _ => unreachable!("pool_geom on non-window pool layer"),
        };
        PoolGeom::new(n * c, h, w, kernel, stride).ok_or_else(|| {
            self.shape_err(format!("pool window {kernel} does not fit input {h}x{w}"))
        })
    }

    fn shape_err(&self, message: String) -> Error {
        Error::shape(format!("{} layer", self.name()), message)
    }

    /// Output shape for a given input shape, validating the input contract.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Conv2d { .. } => {
                let g = self.conv_geom(input)?;
                Ok(vec![g.batch, g.out_channels, g.out_h, g.out_w])
            }
            LayerKind::Linear { .. } => {
                let (n, _, o) = self.linear_dims(input)?;
                Ok(vec![n, o])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { .. } | LayerKind::AvgPool2d { .. } => {
                let g = self.pool_geom(input)?;
                Ok(vec![input[0], input[1], g.out_h, g.out_w])
            }
            LayerKind::GlobalAvgPool => match input[..] {
                [n, c, _, _] => Ok(vec![n, c]),
                _ => Err(self.shape_err(format!("expected N,C,H,W input, got {input:?}"))),
            },
            LayerKind::Flatten => {
                if input.len() < 2 {
                    return Err(self.shape_err(format!("expected batched input, got {input:?}")));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.output)
    }

    /// Forward pass that also returns max-pool argmax indices.
    pub fn forward_traced(&self, x: &Tensor) -> Result<LayerForward> {
        let out_shape = self.output_shape(x.shape())?;
        let mut pool_indices = None;
        let data = match self.kind {
            LayerKind::Conv2d { .. } => {
                let g = self.conv_geom(x.shape())?;
                kernels::conv2d_forward(
                    x.data(),
                    self.weight().unwrap().data(),
                    self.bias().map(|b| b.data()),
                    &g,
                )
            }
            LayerKind::Linear { .. } => {
                let (n, i, o) = self.linear_dims(x.shape())?;
                kernels::linear_forward(x.data(), self.weight().unwrap().data(), self.bias().map(|b| b.data()), n, i, o)
            }
            LayerKind::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::MaxPool2d { .. } => {
                let g = self.pool_geom(x.shape())?;
                let (out, idx) = kernels::maxpool_forward(x.data(), &g);
                pool_indices = Some(PoolIndices {
                    input_shape: x.shape().to_vec(),
                    indices: idx,
                });
                out
            }
            LayerKind::AvgPool2d { .. } => {
                let g = self.pool_geom(x.shape())?;
                kernels::avgpool_forward(x.data(), &g)
            }
            LayerKind::GlobalAvgPool => gap_forward(x.data(), x.shape()),
            LayerKind::Flatten => x.data().to_vec(),
        };
        Ok(LayerForward {
            output: Tensor::new(out_shape, data)?,
            pool_indices,
        })
    }

    fn check_grad_out(&self, x: &Tensor, grad_out: &Tensor) -> Result<()> {
        let expected = self.output_shape(x.shape())?;
        if grad_out.shape() != expected.as_slice() {
            return Err(self.shape_err(format!(
                "upstream tensor has shape {:?}, layer output is {:?}",
                grad_out.shape(),
                expected
            )));
        }
        Ok(())
    }

    /// Gradient of the layer output with respect to its input, contracted
    /// with `grad_out`. Max pooling routes through `pool` indices.
    pub fn backward_gradient(&self, x: &Tensor, grad_out: &Tensor, pool: Option<&PoolIndices>) -> Result<Tensor> {
        self.check_grad_out(x, grad_out)?;
        let data = match self.kind {
            LayerKind::Conv2d { .. } => {
                let g = self.conv_geom(x.shape())?;
                kernels::conv2d_transpose(grad_out.data(), self.weight().unwrap().data(), &g)
            }
            LayerKind::Linear { .. } => {
                let (n, i, o) = self.linear_dims(x.shape())?;
                kernels::linear_transpose(grad_out.data(), self.weight().unwrap().data(), n, i, o)
            }
            LayerKind::Relu => x
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                .collect(),
            LayerKind::MaxPool2d { .. } => {
                let pool = pool.ok_or(Error::MissingPoolIndices { kind: self.name() })?;
                if pool.input_shape != x.shape() || pool.indices.len() != grad_out.len() {
                    return Err(self.shape_err("pool indices do not match this input".into()));
                }
                let mut dx = vec![0.0f32; x.len()];
                for (&i, &g) in pool.indices.iter().zip(grad_out.data()) {
                    dx[i] += g;
                }
                dx
            }
            LayerKind::AvgPool2d { .. } => {
                let g = self.pool_geom(x.shape())?;
                kernels::avgpool_transpose(grad_out.data(), &g)
            }
            LayerKind::GlobalAvgPool => gap_transpose(grad_out.data(), x.shape()),
            LayerKind::Flatten => grad_out.data().to_vec(),
        };
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Gradient with respect to weight (and bias) for conv and linear layers.
    pub fn backward_weight_gradient(&self, x: &Tensor, grad_out: &Tensor) -> Result<WeightGradient> {
        let (dw, db) = match self.kind {
            LayerKind::Conv2d { .. } => {
                self.check_grad_out(x, grad_out)?;
                let g = self.conv_geom(x.shape())?;
                kernels::conv2d_weight_grad(x.data(), grad_out.data(), &g)
            }
            LayerKind::Linear { .. } => {
                self.check_grad_out(x, grad_out)?;
                let (n, i, o) = self.linear_dims(x.shape())?;
                kernels::linear_weight_grad(x.data(), grad_out.data(), n, i, o)
            }
            _ => {
                return Err(Error::Unsupported {
                    kind: self.name(),
                    op: "backward_weight_gradient",
                })
            }
        };
        let weight = Tensor::new(self.weight().unwrap().shape().to_vec(), dw)?;
        let bias = match self.bias() {
            Some(b) => Some(Tensor::new(b.shape().to_vec(), db)?),
            None => None,
        };
        Ok(WeightGradient { weight, bias })
    }

    /// Proportional relevance redistribution
    /// `R_i = x_i * sum_j w'_ij r_j / (sum_i' x_i' w'_i'j + sign * eps)`,
    /// with `w'` the transformed weights. Bias never enters the ratio.
    ///
    /// ReLU and flatten pass relevance through unchanged; max pooling routes
    /// it to the window argmax of `x`; average pooling uses uniform weights.
    pub fn redistribute_relevance(
        &self,
        x: &Tensor,
        transform: WeightTransform,
        r_out: &Tensor,
        epsilon: f64,
    ) -> Result<Tensor> {
        self.check_grad_out(x, r_out)?;
        match self.kind {
            LayerKind::Relu => Ok(r_out.clone()),
            LayerKind::Flatten => r_out.reshape(x.shape().to_vec()),
            LayerKind::MaxPool2d { .. } => {
                let fwd = self.forward_traced(x)?;
                self.backward_gradient(x, r_out, fwd.pool_indices.as_ref())
            }
            _ => self.proportional(x, transform, r_out, epsilon),
        }
    }

    /// Redistribution with a binary mask standing in for the activations.
    pub fn redistribute_to_mask(
        &self,
        mask: &Tensor,
        transform: WeightTransform,
        r_out: &Tensor,
        epsilon: f64,
    ) -> Result<Tensor> {
        if let Some(&bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask(bad));
        }
        self.redistribute_relevance(mask, transform, r_out, epsilon)
    }

    /// Forward map without bias, in `f64`, for an arbitrary weight transform.
    fn linear_map(&self, x: &[f64], shape: &[usize], transform: WeightTransform) -> Result<Vec<f64>> {
        Ok(match self.kind {
            LayerKind::Conv2d { .. } => {
                let g = self.conv_geom(shape)?;
                let w = self.transformed_weight_f64(transform);
                kernels::conv2d_forward(x, &w, None, &g)
            }
            LayerKind::Linear { .. } => {
                let (n, i, o) = self.linear_dims(shape)?;
                let w = self.transformed_weight_f64(transform);
                kernels::linear_forward(x, &w, None, n, i, o)
            }
            LayerKind::AvgPool2d { .. } => {
                let g = self.pool_geom(shape)?;
                let s = transform.apply_scalar(1.0) as f64;
                kernels::avgpool_forward(x, &g).into_iter().map(|v| v * s).collect()
            }
            LayerKind::GlobalAvgPool => {
                let s = transform.apply_scalar(1.0) as f64;
                gap_forward(x, shape).into_iter().map(|v| v * s).collect()
            }
            _ => {
                return Err(Error::Unsupported {
                    kind: self.name(),
                    op: "linear_map",
                })
            }
        })
    }

    /// Transposed map matching [`Self::linear_map`].
    fn linear_map_transpose(&self, s: &[f64], shape: &[usize], transform: WeightTransform) -> Result<Vec<f64>> {
        Ok(match self.kind {
            LayerKind::Conv2d { .. } => {
                let g = self.conv_geom(shape)?;
                let w = self.transformed_weight_f64(transform);
                kernels::conv2d_transpose(s, &w, &g)
            }
            LayerKind::Linear { .. } => {
                let (n, i, o) = self.linear_dims(shape)?;
                let w = self.transformed_weight_f64(transform);
                kernels::linear_transpose(s, &w, n, i, o)
            }
            LayerKind::AvgPool2d { .. } => {
                let g = self.pool_geom(shape)?;
                let scale = transform.apply_scalar(1.0) as f64;
                kernels::avgpool_transpose(s, &g).into_iter().map(|v| v * scale).collect()
            }
            LayerKind::GlobalAvgPool => {
                let scale = transform.apply_scalar(1.0) as f64;
                gap_transpose(s, shape).into_iter().map(|v| v * scale).collect()
            }
            _ => {
                return Err(Error::Unsupported {
                    kind: self.name(),
                    op: "linear_map_transpose",
                })
            }
        })
    }

    fn transformed_weight_f64(&self, transform: WeightTransform) -> Vec<f64> {
        self.weight()
            .expect("weighted layer")
            .data()
            .iter()
            .map(|&w| transform.apply_scalar(w) as f64)
            .collect()
    }

    fn proportional(&self, x: &Tensor, transform: WeightTransform, r_out: &Tensor, eps: f64) -> Result<Tensor> {
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let z = self.linear_map(&xs, x.shape(), transform)?;
        let s: Vec<f64> = z
            .iter()
            .zip(r_out.data())
            .map(|(&z, &r)| r as f64 / stabilize(z, eps))
            .collect();
        let c = self.linear_map_transpose(&s, x.shape(), transform)?;
        let data = xs.iter().zip(&c).map(|(a, b)| (a * b) as f32).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Bounded-input rule for the first layer:
    /// `R_i = sum_j (x_i w_ij - l_i w+_ij - h_i w-_ij) / z_j * r_j` with
    /// `z_j = sum_i (x_i w_ij - l_i w+_ij - h_i w-_ij)`.
    /// `low` and `high` are shaped like `x`; padding contributes zero to all terms.
    pub fn redistribute_zbeta(
        &self,
        x: &Tensor,
        low: &Tensor,
        high: &Tensor,
        r_out: &Tensor,
        epsilon: f64,
    ) -> Result<Tensor> {
        if !self.is_weighted() {
            return Err(Error::Unsupported {
                kind: self.name(),
                op: "zbeta rule",
            });
        }
        self.check_grad_out(x, r_out)?;
        x.expect_same_shape(low, "zbeta low bound")?;
        x.expect_same_shape(high, "zbeta high bound")?;
        let to64 = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
        let (xs, ls, hs) = (to64(x), to64(low), to64(high));
        let shape = x.shape();
        let zx = self.linear_map(&xs, shape, WeightTransform::Identity)?;
        let zl = self.linear_map(&ls, shape, WeightTransform::PositivePart)?;
        let zh = self.linear_map(&hs, shape, WeightTransform::NegativePart)?;
        let s: Vec<f64> = (0..zx.len())
            .map(|j| r_out.data()[j] as f64 / stabilize(zx[j] - zl[j] - zh[j], epsilon))
            .collect();
        let cx = self.linear_map_transpose(&s, shape, WeightTransform::Identity)?;
        let cl = self.linear_map_transpose(&s, shape, WeightTransform::PositivePart)?;
        let ch = self.linear_map_transpose(&s, shape, WeightTransform::NegativePart)?;
        let data = (0..xs.len())
            .map(|i| (xs[i] * cx[i] - ls[i] * cl[i] - hs[i] * ch[i]) as f32)
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

fn gap_forward<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (planes, area) = (shape[0] * shape[1], shape[2] * shape[3]);
    let inv = T::from_f32(1.0) / T::from_f32(area as f32);
    (0..planes)
        .map(|p| {
            let mut acc = T::default();
            for &v in &x[p * area..(p + 1) * area] {
                acc += v;
            }
            acc * inv
        })
        .collect()
}

fn gap_transpose<T: Scalar>(g: &[T], shape: &[usize]) -> Vec<T> {
    let area = shape[2] * shape[3];
    let inv = T::from_f32(1.0) / T::from_f32(area as f32);
    g.iter()
        .flat_map(|&v| std::iter::repeat_n(v * inv, area))
        .collect()
}

fn check_bias(bias: &Option<Tensor>, outputs: usize, kind: &str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [outputs] {
            return Err(Error::shape(
                kind,
                format!("bias shape {:?} does not match {outputs} outputs", b.shape()),
            ));
        }
    }
    Ok(())
}

fn check_pool(kernel: usize, stride: usize) -> Result<()> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool kernel and stride must be >= 1".into()));
    }
    Ok(())
}

//! Loop kernels for convolution, dense and pooling layers.
//!
//! Everything here works on flat row-major slices. The scalar type is generic
//! so relevance redistribution can accumulate in `f64` while the inference
//! path stays in `f32`.

use std::ops::{Add, AddAssign, Div, Mul, Sub};

pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + AddAssign
{
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Geometry of a 2-D convolution over an `N,C,H,W` batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let ph = in_h + 2 * padding;
        let pw = in_w + 2 * padding;
        if stride == 0 || kernel_h > ph || kernel_w > pw {
            return None;
        }
        Some(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Output index range `[lo, hi)` for which `o * stride + k - pad` lands in `0..in_len`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = in_len + pad;
    let hi = if top > k {
        ((top - 1 - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![T::default(); g.output_len()];
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + oc) * plane_out..][..plane_out];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[oc]);
            }
            for ic in 0..g.in_channels {
                let src = &x[(n * g.in_channels + ic) * plane_in..][..plane_in];
                let wbase = (oc * g.in_channels + ic) * g.kernel_h * g.kernel_w;
                for ki in 0..g.kernel_h {
                    let (oh_lo, oh_hi) = valid_range(ki, g.stride, g.padding, g.in_h, g.out_h);
                    for kj in 0..g.kernel_w {
                        let wv = weight[wbase + ki * g.kernel_w + kj];
                        let (ow_lo, ow_hi) = valid_range(kj, g.stride, g.padding, g.in_w, g.out_w);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.padding;
                            let row = &src[ih * g.in_w..][..g.in_w];
                            let drow = &mut dst[oh * g.out_w..][..g.out_w];
                            for ow in ow_lo..ow_hi {
                                drow[ow] += wv * row[ow * g.stride + kj - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Transposed convolution: scatters `grad_out` back onto the input grid.
pub fn conv2d_transpose<T: Scalar>(grad_out: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut dx = vec![T::default(); g.input_len()];
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let src = &grad_out[(n * g.out_channels + oc) * plane_out..][..plane_out];
            for ic in 0..g.in_channels {
                let dst = &mut dx[(n * g.in_channels + ic) * plane_in..][..plane_in];
                let wbase = (oc * g.in_channels + ic) * g.kernel_h * g.kernel_w;
                for ki in 0..g.kernel_h {
                    let (oh_lo, oh_hi) = valid_range(ki, g.stride, g.padding, g.in_h, g.out_h);
                    for kj in 0..g.kernel_w {
                        let wv = weight[wbase + ki * g.kernel_w + kj];
                        let (ow_lo, ow_hi) = valid_range(kj, g.stride, g.padding, g.in_w, g.out_w);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.padding;
                            let srow = &src[oh * g.out_w..][..g.out_w];
                            let drow = &mut dst[ih * g.in_w..][..g.in_w];
                            for ow in ow_lo..ow_hi {
                                drow[ow * g.stride + kj - g.padding] += wv * srow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Weight and bias gradients of a convolution.
pub fn conv2d_weight_grad(x: &[f32], grad_out: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut dw = vec![0.0f32; g.weight_len()];
    let mut db = vec![0.0f32; g.out_channels];
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let gy = &grad_out[(n * g.out_channels + oc) * plane_out..][..plane_out];
            db[oc] += gy.iter().sum::<f32>();
            for ic in 0..g.in_channels {
                let src = &x[(n * g.in_channels + ic) * plane_in..][..plane_in];
                let wbase = (oc * g.in_channels + ic) * g.kernel_h * g.kernel_w;
                for ki in 0..g.kernel_h {
                    let (oh_lo, oh_hi) = valid_range(ki, g.stride, g.padding, g.in_h, g.out_h);
                    for kj in 0..g.kernel_w {
                        let (ow_lo, ow_hi) = valid_range(kj, g.stride, g.padding, g.in_w, g.out_w);
                        let mut acc = 0.0f32;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.padding;
                            let row = &src[ih * g.in_w..][..g.in_w];
                            let grow = &gy[oh * g.out_w..][..g.out_w];
                            for ow in ow_lo..ow_hi {
                                acc += grow[ow] * row[ow * g.stride + kj - g.padding];
                            }
                        }
                        dw[wbase + ki * g.kernel_w + kj] += acc;
                    }
                }
            }
        }
    }
    (dw, db)
}

/// `y[n, o] = sum_i x[n, i] * w[o, i] (+ b[o])`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    in_f: usize,
    out_f: usize,
) -> Vec<T> {
    let mut out = vec![T::default(); batch * out_f];
    for n in 0..batch {
        let xr = &x[n * in_f..][..in_f];
        for o in 0..out_f {
            let wr = &weight[o * in_f..][..in_f];
            let mut acc = bias.map(|b| b[o]).unwrap_or_default();
            for (a, b) in xr.iter().zip(wr) {
                acc += *a * *b;
            }
            out[n * out_f + o] = acc;
        }
    }
    out
}

/// `dx[n, i] = sum_o g[n, o] * w[o, i]`.
pub fn linear_transpose<T: Scalar>(grad_out: &[T], weight: &[T], batch: usize, in_f: usize, out_f: usize) -> Vec<T> {
    let mut dx = vec![T::default(); batch * in_f];
    for n in 0..batch {
        let dr = &mut dx[n * in_f..][..in_f];
        for o in 0..out_f {
            let gv = grad_out[n * out_f + o];
            let wr = &weight[o * in_f..][..in_f];
            for (d, w) in dr.iter_mut().zip(wr) {
                *d += gv * *w;
            }
        }
    }
    dx
}

pub fn linear_weight_grad(
    x: &[f32],
    grad_out: &[f32],
    batch: usize,
    in_f: usize,
    out_f: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut dw = vec![0.0f32; out_f * in_f];
    let mut db = vec![0.0f32; out_f];
    for n in 0..batch {
        let xr = &x[n * in_f..][..in_f];
        for o in 0..out_f {
            let gv = grad_out[n * out_f + o];
            db[o] += gv;
            for (d, xv) in dw[o * in_f..][..in_f].iter_mut().zip(xr) {
                *d += gv * xv;
            }
        }
    }
    (dw, db)
}

/// Geometry of a square pooling window without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(planes: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Option<Self> {
        if kernel == 0 || stride == 0 || kernel > in_h || kernel > in_w {
            return None;
        }
        Some(Self {
            planes,
            in_h,
            in_w,
            kernel,
            stride,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
        })
    }

    pub fn output_len(&self) -> usize {
        self.planes * self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.planes * self.in_h * self.in_w
    }

    /// Visits every `(output index, input index)` pair covered by the windows.
    #[inline]
    pub fn for_each_window(&self, mut f: impl FnMut(usize, usize)) {
        for p in 0..self.planes {
            for oh in 0..self.out_h {
                for ow in 0..self.out_w {
                    let o = (p * self.out_h + oh) * self.out_w + ow;
                    for ki in 0..self.kernel {
                        let ih = oh * self.stride + ki;
                        for kj in 0..self.kernel {
                            let iw = ow * self.stride + kj;
                            f(o, (p * self.in_h + ih) * self.in_w + iw);
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; ties go to the first position in row-major window order.
pub fn maxpool_forward(x: &[f32], g: &PoolGeom) -> (Vec<f32>, Vec<usize>) {
    let mut out = vec![f32::NEG_INFINITY; g.output_len()];
    let mut idx = vec![usize::MAX; g.output_len()];
    g.for_each_window(|o, i| {
        if idx[o] == usize::MAX || x[i] > out[o] {
            out[o] = x[i];
            idx[o] = i;
        }
    });
    (out, idx)
}

pub fn avgpool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::from_f32(1.0) / T::from_f32((g.kernel * g.kernel) as f32);
    let mut out = vec![T::default(); g.output_len()];
    g.for_each_window(|o, i| out[o] += x[i] * inv);
    out
}

pub fn avgpool_transpose<T: Scalar>(grad_out: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::from_f32(1.0) / T::from_f32((g.kernel * g.kernel) as f32);
    let mut dx = vec![T::default(); g.input_len()];
    g.for_each_window(|o, i| dx[i] += grad_out[o] * inv);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        // 3-tap kernel, pad 1, 5 inputs, 5 outputs: tap 0 skips the first output.
        assert_eq!(valid_range(0, 1, 1, 5, 5), (1, 5));
        assert_eq!(valid_range(1, 1, 1, 5, 5), (0, 5));
        assert_eq!(valid_range(2, 1, 1, 5, 5), (0, 4));
        // stride 2, no padding, 5 inputs, 2 outputs
        assert_eq!(valid_range(2, 2, 0, 5, 2), (0, 2));
    }

    #[test]
    fn maxpool_tie_takes_first() {
        let g = PoolGeom::new(1, 2, 2, 2, 2).unwrap();
        let (out, idx) = maxpool_forward(&[1.0, 1.0, 0.0, 1.0], &g);
        assert_eq!(out, vec![1.0]);
        assert_eq!(idx, vec![0]);
    }
}

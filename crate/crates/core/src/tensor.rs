//! Dense row-major `f32` tensors of rank 1 to 4 and the `GHT1` file format.
//!
//! Image tensors use `N,C,H,W` layout, vectors use `N,F`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic prefix of a `GHT1` tensor file.
pub const GHT_MAGIC: &[u8; 8] = b"GHTENSR1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(N, C, H, W)` view of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank-4 N,C,H,W tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// `(N, F)` view of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, f] => Ok((n, f)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank-2 N,F tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other, "zip")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    /// Sum accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                context,
                format!("shape {:?} does not match {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Sums a `1,C,H,W` (or `C,H,W`) tensor over channels into an `H,W` map.
    pub fn channel_sum(&self) -> Result<Tensor> {
        let (c, h, w) = match self.shape[..] {
            [1, c, h, w] => (c, h, w),
            [c, h, w] => (c, h, w),
            [_, _] => return Ok(self.clone()),
            _ => {
                return Err(Error::shape(
                    "channel_sum",
                    format!("expected 1,C,H,W tensor, got {:?}", self.shape),
                ))
            }
        };
        let plane = h * w;
        let mut out = vec![0.0f32; plane];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&self.data[ch * plane..(ch + 1) * plane]) {
                *o += v;
            }
        }
        Tensor::new(vec![h, w], out)
    }

    /// Serializes into `GHT1` bytes.
    pub fn to_ght_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ght_byte_len(&self.shape));
        out.extend_from_slice(GHT_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_ght_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != GHT_MAGIC {
            return Err(Error::TensorFormat("missing GHTENSR1 magic".into()));
        }
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::TensorFormat("truncated header".into()))
        };
        let ndim = read_u32(8)? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(Error::TensorFormat(format!("unsupported rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|i| read_u32(12 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected = ght_byte_len(&shape);
        if bytes.len() != expected {
            return Err(Error::TensorFormat(format!(
                "expected {expected} bytes for shape {shape:?}, found {}",
                bytes.len()
            )));
        }
        let header = 12 + 4 * ndim;
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn write_ght(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_ght_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_ght(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ght_bytes(&bytes)
    }
}

/// Byte length of a `GHT1` file holding a tensor of this shape.
pub fn ght_byte_len(shape: &[usize]) -> usize {
    8 + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..=4, got {}", shape.len()),
        ));
    }
    if shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}

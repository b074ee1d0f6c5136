//! Most-relevant-first insertion: top-ranked pixels of the original image
//! are pasted onto a blurred copy and the classifier is re-run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

use super::argmax;
use super::dataset::AnnotatedSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MorfConfig {
    /// Number of insertion steps.
    pub steps: usize,
    /// Percentage of pixels added per step.
    pub step_percent: f64,
    pub sigma: f64,
}

impl Default for MorfConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_percent: 1.0,
            sigma: 10.0,
        }
    }
}

impl MorfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_percent > 0.0) || self.steps as f64 * self.step_percent > 100.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "{} steps of {}% exceed the image",
                self.steps, self.step_percent
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument("blur sigma must be positive".into()));
        }
        Ok(())
    }

    /// Percentages `s, 2s, ..., steps * s`.
    pub fn percents(&self) -> Vec<f64> {
        (1..=self.steps).map(|k| k as f64 * self.step_percent).collect()
    }
}

/// Normalized 1-D Gaussian kernel truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of each `H,W` plane with replicated borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = vec![0.0f32; image.len()];
    let mut tmp = vec![0.0f64; h * w];
    for p in 0..n * c {
        let src = &image.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)] as f64)
                    .sum();
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                    .sum::<f64>() as f32;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Pixel indices sorted by descending map value; ties keep row-major order.
pub fn relevance_order(map: &Tensor) -> Result<Vec<usize>> {
    map.dims2()?;
    map.ensure_finite("attribution map")?;
    let d = map.data();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    Ok(order)
}

/// Number of pixels inserted at `percent`: `floor(percent * H * W / 100)`.
pub fn pixels_at(percent: f64, area: usize) -> usize {
    (((percent * area as f64) / 100.0) + 1e-9).floor().min(area as f64) as usize
}

/// Copies the first `count` ranked pixels (all channels) of `original` into `blurred`.
pub fn insert_pixels(original: &Tensor, blurred: &Tensor, order: &[usize], count: usize) -> Result<Tensor> {
    original.expect_same_shape(blurred, "insertion")?;
    let (n, c, h, w) = original.dims4()?;
    let plane = h * w;
    let mut out = blurred.clone();
    let d = out.data_mut();
    for &p in &order[..count.min(order.len())] {
        for ch in 0..n * c {
            d[ch * plane + p] = original.data()[ch * plane + p];
        }
    }
    Ok(out)
}

/// Prepared base image and pixel ranking for one (image, map) pair.
pub struct Insertion<'a> {
    image: &'a Tensor,
    blurred: Tensor,
    order: Vec<usize>,
    area: usize,
}

impl<'a> Insertion<'a> {
    /// `image` holds pixel values in `[0, 1]`; `map` is its `H,W` attribution.
    pub fn new(image: &'a Tensor, map: &Tensor, sigma: f64) -> Result<Self> {
        let (_, _, h, w) = image.dims4()?;
        if map.shape() != [h, w] {
            return Err(Error::shape("insertion", format!("map {:?} for {h}x{w} image", map.shape())));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument("blur sigma must be positive".into()));
        }
        Ok(Self {
            image,
            blurred: gaussian_blur(image, sigma)?,
            order: relevance_order(map)?,
            area: h * w,
        })
    }

    /// The blurred image with the top `percent`% pixels restored.
    pub fn probe(&self, percent: f64) -> Result<Tensor> {
        insert_pixels(self.image, &self.blurred, &self.order, pixels_at(percent, self.area))
    }

    /// Whether the model's top-1 class on the probe is one of `labels`.
    pub fn correct(&self, model: &ModelGraph, percent: f64, labels: &[usize]) -> Result<bool> {
        let logits = model.forward(&model.normalize(&self.probe(percent)?)?)?;
        Ok(labels.contains(&argmax(logits.data())))
    }
}

/// Correctness at each configured insertion step for one image.
pub fn insertion_steps(
    model: &ModelGraph,
    image: &Tensor,
    map: &Tensor,
    labels: &[usize],
    cfg: &MorfConfig,
) -> Result<Vec<bool>> {
    cfg.validate()?;
    let ins = Insertion::new(image, map, cfg.sigma)?;
    cfg.percents().into_iter().map(|pct| ins.correct(model, pct, labels)).collect()
}

/// Insertion accuracy per step over `samples`, one map per sample.
pub fn morf_insertion_curve(
    model: &ModelGraph,
    samples: &[AnnotatedSample],
    maps: &[Tensor],
    cfg: &MorfConfig,
) -> Result<MorfCurve> {
    if samples.len() != maps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} maps for {} samples",
            maps.len(),
            samples.len()
        )));
    }
    let steps = samples
        .iter()
        .zip(maps)
        .map(|(s, m)| insertion_steps(model, &s.image, m, &s.labels, cfg))
        .collect::<Result<Vec<_>>>()?;
    MorfCurve::from_steps(cfg, &steps)
}

/// Accuracy per insertion percentage over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorfCurve {
    pub percents: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl MorfCurve {
    /// Averages per-image step correctness (`steps[i][k]`).
    pub fn from_steps(cfg: &MorfConfig, steps: &[Vec<bool>]) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("insertion curve over no images".into()));
        }
        let percents = cfg.percents();
        let accuracy = (0..percents.len())
            .map(|k| steps.iter().filter(|s| s[k]).count() as f64 / steps.len() as f64)
            .collect();
        Ok(Self { percents, accuracy })
    }

    /// Mean accuracy over all steps.
    pub fn area(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_normalized_and_symmetric() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((k[0] - k[12]).abs() < 1e-15);
    }

    #[test]
    fn blur_keeps_constant_image() {
        let img = Tensor::full(vec![1, 2, 5, 5], 0.4);
        let b = gaussian_blur(&img, 10.0).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn order_stable_descending() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 3.0, 3.0, -1.0]).unwrap();
        assert_eq!(relevance_order(&m).unwrap(), vec![1, 2, 0, 3]);
    }

    #[test]
    fn pixel_counts() {
        assert_eq!(pixels_at(0.0, 1024), 0);
        assert_eq!(pixels_at(1.0, 1024), 10);
        assert_eq!(pixels_at(3.0, 100), 3);
        assert_eq!(pixels_at(100.0, 1024), 1024);
    }

    #[test]
    fn full_insertion_restores_original() {
        let img = Tensor::from_fn(vec![1, 3, 4, 4], |i| (i % 7) as f32 / 7.0);
        let blurred = gaussian_blur(&img, 1.0).unwrap();
        let order: Vec<usize> = (0..16).collect();
        assert_eq!(insert_pixels(&img, &blurred, &order, 16).unwrap(), img);
        assert_eq!(insert_pixels(&img, &blurred, &order, 0).unwrap(), blurred);
    }

    #[test]
    fn config_validation() {
        assert!(MorfConfig { steps: 101, ..MorfConfig::default() }.validate().is_err());
        assert!(MorfConfig { steps: 100, ..MorfConfig::default() }.validate().is_ok());
    }
}

//! Diverging red/white/blue heatmaps for signed attribution maps.

use std::path::Path;

use image::ColorType;

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Color of one normalized value `t` in `[-1, 1]`.
#[inline]
pub fn seismic(t: f64) -> [u8; 3] {
    if t >= 0.0 {
        let c = (255.0 * (1.0 - t)).round() as u8;
        [255, c, c]
    } else {
        let c = (255.0 * (1.0 + t)).round() as u8;
        [c, c, 255]
    }
}

/// RGB pixels for a 2-D map normalized by its largest magnitude.
/// An all-zero map renders white.
pub fn heatmap_rgb(map: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let [h, w] = map.shape()[..] else {
        return Err(Error::shape("render_heatmap", format!("expected a 2-D map, got {:?}", map.shape())));
    };
    let max = map.max_abs() as f64;
    let px = map
        .data()
        .iter()
        .flat_map(|&v| if max == 0.0 { [255; 3] } else { seismic(v as f64 / max) })
        .collect();
    Ok((h, w, px))
}

pub fn heatmap_png(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w, px) = heatmap_rgb(map)?;
    imageio::encode_png(w, h, &px, ColorType::Rgb8)
}

pub fn render_heatmap(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, px) = heatmap_rgb(map)?;
    imageio::write_png(path, w, h, &px, ColorType::Rgb8)
}

/// Places heatmaps of equal size side by side with a 2-pixel white gap.
pub fn heatmap_strip(maps: &[Tensor]) -> Result<(usize, usize, Vec<u8>)> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("no maps to render".into()))?;
    let [h, w] = first.shape()[..] else {
        return Err(Error::shape("heatmap_strip", format!("expected 2-D maps, got {:?}", first.shape())));
    };
    let gap = 2;
    let total_w = maps.len() * w + (maps.len() - 1) * gap;
    let mut px = vec![255u8; h * total_w * 3];
    for (k, m) in maps.iter().enumerate() {
        first.expect_same_shape(m, "heatmap_strip")?;
        let (_, _, tile) = heatmap_rgb(m)?;
        let x0 = k * (w + gap);
        for y in 0..h {
            let dst = (y * total_w + x0) * 3;
            px[dst..dst + w * 3].copy_from_slice(&tile[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Ok((h, total_w, px))
}

pub fn render_strip(maps: &[Tensor], path: impl AsRef<Path>) -> Result<()> {
    let (h, w, px) = heatmap_strip(maps)?;
    imageio::write_png(path, w, h, &px, ColorType::Rgb8)
}

//! Per-map localization and sparsity scores.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::dataset::Mask;

/// Location of the largest value of an `H,W` map; the first occurrence in
/// row-major order wins ties.
pub fn argmax_pixel(map: &Tensor) -> Result<(usize, usize)> {
    let (_, w) = map.dims2()?;
    map.ensure_finite("attribution map")?;
    Ok(argmax_index(map.data()).map(|i| (i / w, i % w)).unwrap_or((0, 0)))
}

fn argmax_index(v: &[f32]) -> Option<usize> {
    (!v.is_empty()).then(|| super::argmax(v))
}

fn check_mask(map: &Tensor, mask: &Mask) -> Result<(usize, usize)> {
    let (h, w) = map.dims2()?;
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::shape(
            "mask",
            format!("map is {h}x{w}, mask is {}x{}", mask.height(), mask.width()),
        ));
    }
    Ok((h, w))
}

/// Pointing-game hit: whether the map's maximum lies in the mask after
/// dilating it by `tolerance` pixels (Euclidean).
pub fn pointing_game(map: &Tensor, mask: &Mask, tolerance: usize) -> Result<bool> {
    let (h, w) = check_mask(map, mask)?;
    if mask.area() == 0 {
        return Err(Error::InvalidArgument("pointing game with an empty annotation".into()));
    }
    let (py, px) = argmax_pixel(map)?;
    if tolerance == 0 {
        return Ok(mask.get(py, px));
    }
    let t = tolerance as isize;
    for dy in -t..=t {
        for dx in -t..=t {
            if dy * dy + dx * dx > t * t {
                continue;
            }
            let (y, x) = (py as isize + dy, px as isize + dx);
            if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) && mask.get(y as usize, x as usize) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Hit/miss counter for the pointing game.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PointingTally {
    pub hits: usize,
    pub misses: usize,
}

impl PointingTally {
    pub fn record(&mut self, hit: bool) {
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }
}

/// Share of strictly positive entries.
pub fn positive_ratio(map: &Tensor) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::InvalidArgument("positive ratio of an empty map".into()));
    }
    map.ensure_finite("attribution map")?;
    Ok(map.data().iter().filter(|&&v| v > 0.0).count() as f64 / map.len() as f64)
}

/// Mean min-max normalized value outside the mask divided by the mean inside.
pub fn outside_inside_ratio(map: &Tensor, mask: &Mask) -> Result<f64> {
    check_mask(map, mask)?;
    map.ensure_finite("attribution map")?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in map.data() {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    if hi <= lo {
        return Err(Error::UndefinedRatio("map is constant".into()));
    }
    let (mut sin, mut nin, mut sout, mut nout) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &inside) in map.data().iter().zip(mask.bits()) {
        let u = (v as f64 - lo) / (hi - lo);
        if inside {
            sin += u;
            nin += 1;
        } else {
            sout += u;
            nout += 1;
        }
    }
    if nin == 0 || nout == 0 {
        return Err(Error::UndefinedRatio("mask covers none or all of the image".into()));
    }
    let inside = sin / nin as f64;
    if inside == 0.0 {
        return Err(Error::UndefinedRatio("mean normalized value inside the mask is zero".into()));
    }
    Ok((sout / nout as f64) / inside)
}

/// Pearson correlation; zero when either input has zero variance.
pub fn pearson(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("pearson", format!("lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

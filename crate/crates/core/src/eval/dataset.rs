//! Synthetic shape scenes with exact per-object masks, and their on-disk
//! form (PNG images, instance-mask PNGs, JSON annotations).

use std::fs;
use std::path::Path;

use image::ColorType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Disc,
    Square,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Disc, ShapeClass::Square, ShapeClass::Triangle, ShapeClass::Cross];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Disc => "disc",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }

    fn base_color(&self) -> [f32; 3] {
        match self {
            ShapeClass::Disc => [0.90, 0.20, 0.20],
            ShapeClass::Square => [0.20, 0.80, 0.30],
            ShapeClass::Triangle => [0.20, 0.35, 0.95],
            ShapeClass::Cross => [0.95, 0.85, 0.15],
        }
    }

    /// Whether the pixel centre `(px, py)` lies inside the shape drawn in
    /// the square box at `(x0, y0)` with side `side`.
    fn covers(&self, px: f32, py: f32, x0: f32, y0: f32, side: f32) -> bool {
        let (u, v) = ((px - x0) / side, (py - y0) / side);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            ShapeClass::Disc => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeClass::Square => (0.08..0.92).contains(&u) && (0.08..0.92).contains(&v),
            ShapeClass::Triangle => v >= 0.05 && (u - 0.5).abs() <= 0.5 * (v - 0.05) / 0.95,
            ShapeClass::Cross => {
                let band = |t: f32| (0.33..0.67).contains(&t);
                band(u) || band(v)
            }
        }
    }
}

impl std::str::FromStr for ShapeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape class '{s}'")))
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Binary object mask over an `H x W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask has {} entries for {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.bits.len() as f64
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let e = b.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    e.x0 = e.x0.min(x);
                    e.y0 = e.y0.min(y);
                    e.x1 = e.x1.max(x + 1);
                    e.y1 = e.y1.max(y + 1);
                }
            }
        }
        b
    }
}

/// One image with its class labels and a mask and box per label.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    /// `1,3,H,W` in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<usize>,
    pub masks: Vec<Mask>,
    pub boxes: Vec<BBox>,
}

impl AnnotatedSample {
    pub fn mask_for(&self, class: usize) -> Option<&Mask> {
        self.labels.iter().position(|&l| l == class).map(|i| &self.masks[i])
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_classes")]
    pub classes: Vec<ShapeClass>,
    #[serde(default)]
    pub seed: u64,
    /// Probability that an image holds a second object of another class.
    #[serde(default)]
    pub two_object_fraction: f64,
}

fn default_size() -> usize {
    32
}

fn default_classes() -> Vec<ShapeClass> {
    ShapeClass::ALL.to_vec()
}

impl SynthConfig {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        Self {
            n,
            size,
            classes: default_classes(),
            seed,
            two_object_fraction: 0.0,
        }
    }

    pub fn with_two_objects(mut self, fraction: f64) -> Self {
        self.two_object_fraction = fraction;
        self
    }
}

pub const MIN_CANVAS: usize = 16;

/// Renders `n` scenes; the primary class cycles through the class set so
/// classes are balanced. Deterministic per seed.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<AnnotatedSample>> {
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    if cfg.classes.is_empty() {
        return Err(Error::InvalidArgument("class set is empty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.two_object_fraction) {
        return Err(Error::InvalidArgument("two_object_fraction must lie in [0, 1]".into()));
    }
    if cfg.two_object_fraction > 0.0 && cfg.classes.len() < 2 {
        return Err(Error::InvalidArgument("two-object scenes need at least two classes".into()));
    }
    if cfg.size < MIN_CANVAS {
        return Err(Error::InvalidArgument(format!(
            "canvas {0}x{0} too small to place shapes (minimum {MIN_CANVAS})",
            cfg.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.classes.len();
    (0..cfg.n)
        .map(|i| {
            let primary = i % k;
            let mut labels = vec![primary];
            if rng.random::<f64>() < cfg.two_object_fraction {
                labels.push((primary + 1 + rng.random_range(0..k - 1)) % k);
            }
            render_scene(&mut rng, cfg.size, &cfg.classes, labels)
        })
        .collect()
}

fn render_scene(rng: &mut ChaCha8Rng, size: usize, classes: &[ShapeClass], labels: Vec<usize>) -> Result<AnnotatedSample> {
    let plane = size * size;
    let mut img = background(rng, size);
    let mut taken: Vec<(usize, usize, usize)> = Vec::new();
    let mut masks = Vec::with_capacity(labels.len());
    let mut boxes = Vec::with_capacity(labels.len());
    let min_side = (size as f32 * 0.28).round() as usize;
    let max_side = (size as f32 * 0.42).round() as usize;
    for &label in &labels {
        let shape = classes[label];
        let mut placed = None;
        for _ in 0..200 {
            let side = rng.random_range(min_side..=max_side);
            let x0 = rng.random_range(0..=size - side);
            let y0 = rng.random_range(0..=size - side);
            // keep a one-pixel gap between object boxes
            let clear = taken.iter().all(|&(tx, ty, ts)| {
                x0 > tx + ts || tx > x0 + side || y0 > ty + ts || ty > y0 + side
            });
            if clear {
                placed = Some((x0, y0, side));
                break;
            }
        }
        let (x0, y0, side) = placed.ok_or_else(|| {
            Error::InvalidArgument(format!("canvas {size}x{size} too small to place {} objects", labels.len()))
        })?;
        taken.push((x0, y0, side));
        let base = shape.base_color();
        let color: Vec<f32> = base
            .iter()
            .map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
            .collect();
        let mut bits = vec![false; plane];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                if shape.covers(x as f32 + 0.5, y as f32 + 0.5, x0 as f32, y0 as f32, side as f32) {
                    bits[y * size + x] = true;
                    let grain = rng.random_range(-0.03..0.03f32);
                    for c in 0..3 {
                        img[c * plane + y * size + x] = (color[c] + grain).clamp(0.0, 1.0);
                    }
                }
            }
        }
        let mask = Mask::new(size, size, bits)?;
        boxes.push(mask.bbox().expect("shapes cover at least one pixel"));
        masks.push(mask);
    }
    let image = Tensor::new(vec![1, 3, size, size], img.into_iter().map(quantize).collect())?;
    Ok(AnnotatedSample {
        image,
        labels,
        masks,
        boxes,
    })
}

/// Gray backgrounds with a tinted sinusoidal texture and pixel noise.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let plane = size * size;
    let base = rng.random_range(0.35..0.6f32);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let fx = rng.random_range(0.2..0.9f32);
    let fy = rng.random_range(0.2..0.9f32);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let amp = rng.random_range(0.03..0.1f32);
    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let tex = amp * (fx * x as f32 + fy * y as f32 + phase).sin();
            let noise = rng.random_range(-0.04..0.04f32);
            for c in 0..3 {
                img[c * plane + y * size + x] = (base + tint[c] + tex + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn quantize(v: f32) -> f32 {
    (v * 255.0).round() / 255.0
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    classes: Vec<String>,
    samples: Vec<AnnotationEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationEntry {
    file: String,
    labels: Vec<usize>,
    boxes: Vec<[usize; 4]>,
    /// Instance mask: pixel value `i + 1` marks the object of `labels[i]`.
    mask_file: String,
}

pub const ANNOTATION_FILE: &str = "annotations.json";

/// Writes `img_XXXX.png`, `mask_XXXX.png` and `annotations.json` into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[AnnotatedSample], class_names: &[String]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("img_{i:04}.png");
        let mask_file = format!("mask_{i:04}.png");
        imageio::write_image(dir.join(&file), &s.image)?;
        let (h, w) = (s.masks[0].height(), s.masks[0].width());
        let mut inst = vec![0u8; h * w];
        for (k, m) in s.masks.iter().enumerate() {
            for (p, &b) in inst.iter_mut().zip(m.bits()) {
                if b {
                    *p = (k + 1) as u8;
                }
            }
        }
        imageio::write_png(dir.join(&mask_file), w, h, &inst, ColorType::L8)?;
        entries.push(AnnotationEntry {
            file,
            labels: s.labels.clone(),
            boxes: s.boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
            mask_file,
        });
    }
    let ann = AnnotationFile {
        classes: class_names.to_vec(),
        samples: entries,
    };
    let path = dir.join(ANNOTATION_FILE);
    let mut text = serde_json::to_string_pretty(&ann).expect("annotations serialize");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`save_dataset`]; returns samples and class names.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<AnnotatedSample>, Vec<String>)> {
    let dir = dir.as_ref();
    let path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ann: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Config {
        field: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(ann.samples.len());
    for (i, e) in ann.samples.into_iter().enumerate() {
        let image = imageio::read_image(dir.join(&e.file), 3)?;
        let (h, w, inst) = imageio::read_gray_png(dir.join(&e.mask_file))?;
        let masks = (0..e.labels.len())
            .map(|k| Mask::new(h, w, inst.iter().map(|&v| v as usize == k + 1).collect()))
            .collect::<Result<Vec<_>>>()?;
        if let Some(k) = masks.iter().position(|m| m.area() == 0) {
            return Err(Error::Config {
                field: format!("samples[{i}].labels[{k}]"),
                message: "label has no annotated pixels".into(),
            });
        }
        if e.boxes.len() != e.labels.len() {
            return Err(Error::Config {
                field: format!("samples[{i}].boxes"),
                message: "one box per label required".into(),
            });
        }
        samples.push(AnnotatedSample {
            image,
            labels: e.labels,
            masks,
            boxes: e
                .boxes
                .into_iter()
                .map(|[x0, y0, x1, y1]| BBox { x0, y0, x1, y1 })
                .collect(),
        });
    }
    Ok((samples, ann.classes))
}

pub fn class_names(classes: &[ShapeClass]) -> Vec<String> {
    classes.iter().map(|c| c.name().to_string()).collect()
}

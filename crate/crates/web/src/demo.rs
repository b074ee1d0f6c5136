//! Demo state independent of the JS bindings.

use hedgegrad::eval::metrics::{pointing_game, positive_ratio};
use hedgegrad::eval::morf::Insertion;
use hedgegrad::eval::train::Preset;
use hedgegrad::eval::{generate_synthetic_dataset, train_toy_model, AnnotatedSample, ShapeClass, SynthConfig, TrainConfig};
use hedgegrad::render::heatmap_rgb;
use hedgegrad::{attribute, HedgeConfig, ModelGraph, Result, Tensor, Toggles};

pub const SIZE: usize = 32;
const TRAIN_IMAGES: usize = 160;
const EPOCHS: usize = 4;
const BLUR_SIGMA: f64 = 10.0;

/// Summary of the latest attribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapStats {
    pub positive_ratio: f64,
    /// Whether the map's maximum lies on the explained object, if it is present.
    pub pointing_hit: Option<bool>,
    pub predicted: usize,
}

pub struct Scene {
    model: ModelGraph,
    accuracy: f64,
    seed: u64,
    sample: AnnotatedSample,
    map: Option<Tensor>,
}

impl Scene {
    /// Trains the demo model and draws a first scene.
    pub fn new(seed: u64) -> Result<Self> {
        let data = generate_synthetic_dataset(&SynthConfig::new(TRAIN_IMAGES, SIZE, seed).with_two_objects(0.3))?;
        let cfg = TrainConfig {
            preset: Preset::MicroCnn,
            epochs: EPOCHS,
            seed,
            min_accuracy: 0.0,
            max_attempts: 1,
            ..TrainConfig::default()
        };
        let report = train_toy_model(&data, ShapeClass::ALL.len(), &cfg)?;
        let sample = draw(seed.wrapping_add(1), true)?;
        Ok(Self {
            model: report.model,
            accuracy: report.holdout_accuracy,
            seed: seed.wrapping_add(1),
            sample,
            map: None,
        })
    }

    pub fn holdout_accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn next(&mut self, two_objects: bool) -> Result<()> {
        self.seed = self.seed.wrapping_add(1);
        self.sample = draw(self.seed, two_objects)?;
        self.map = None;
        Ok(())
    }

    pub fn labels(&self) -> &[usize] {
        &self.sample.labels
    }

    pub fn image_rgba(&self) -> Result<Vec<u8>> {
        rgba_image(&self.sample.image)
    }

    /// Attributes `class` and returns the heatmap as RGBA pixels.
    pub fn attribute(&mut self, class: usize, gamma: f64, toggles: Toggles) -> Result<(Vec<u8>, MapStats)> {
        let cfg = HedgeConfig {
            gamma,
            toggles,
            ..HedgeConfig::default()
        };
        cfg.validate()?;
        let x = self.model.normalize(&self.sample.image)?;
        let a = attribute(&self.model, &x, class, &cfg)?;
        let pointing_hit = match self.sample.mask_for(class) {
            Some(m) => Some(pointing_game(&a.map, m, 0)?),
            None => None,
        };
        let stats = MapStats {
            positive_ratio: positive_ratio(&a.map)?,
            pointing_hit,
            predicted: a.predicted,
        };
        let (_, _, rgb) = heatmap_rgb(&a.map)?;
        self.map = Some(a.map);
        Ok((add_alpha(&rgb), stats))
    }

    /// Blurred scene with the top `percent`% pixels of the latest map restored,
    /// and whether the model still predicts one of the scene's labels.
    pub fn morf_preview(&self, percent: f64) -> Result<(Vec<u8>, bool)> {
        let map = self
            .map
            .as_ref()
            .ok_or_else(|| hedgegrad::Error::InvalidArgument("attribute a class first".into()))?;
        let ins = Insertion::new(&self.sample.image, map, BLUR_SIGMA)?;
        let probe = ins.probe(percent.clamp(0.0, 100.0))?;
        let correct = ins.correct(&self.model, percent.clamp(0.0, 100.0), &self.sample.labels)?;
        Ok((rgba_image(&probe)?, correct))
    }
}

fn draw(seed: u64, two_objects: bool) -> Result<AnnotatedSample> {
    let cfg = SynthConfig::new(1, SIZE, seed).with_two_objects(if two_objects { 1.0 } else { 0.0 });
    Ok(generate_synthetic_dataset(&cfg)?.remove(0))
}

fn add_alpha(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn rgba_image(image: &Tensor) -> Result<Vec<u8>> {
    let (_, _, rgb, _) = hedgegrad::imageio::tensor_to_bytes(image)?;
    Ok(add_alpha(&rgb))
}

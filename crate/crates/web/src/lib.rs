//! WebAssembly bindings for the in-browser heatmap demo.

pub mod demo;

use hedgegrad::eval::ShapeClass;
use hedgegrad::Toggles;
use wasm_bindgen::prelude::*;

use demo::Scene;

fn js_err(e: hedgegrad::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    stats: Option<demo::MapStats>,
    morf_correct: bool,
}

#[wasm_bindgen]
impl Demo {
    /// Trains a small model in the page; takes a moment.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            scene: Scene::new(seed as u64).map_err(js_err)?,
            stats: None,
            morf_correct: false,
        })
    }

    pub fn size(&self) -> usize {
        demo::SIZE
    }

    #[wasm_bindgen(js_name = classNames)]
    pub fn class_names(&self) -> Vec<String> {
        ShapeClass::ALL.iter().map(|c| c.name().to_string()).collect()
    }

    #[wasm_bindgen(js_name = holdoutAccuracy)]
    pub fn holdout_accuracy(&self) -> f64 {
        self.scene.holdout_accuracy()
    }

    /// Draws a new scene with one or two objects.
    #[wasm_bindgen(js_name = newScene)]
    pub fn new_scene(&mut self, two_objects: bool) -> Result<(), JsError> {
        self.stats = None;
        self.scene.next(two_objects).map_err(js_err)
    }

    pub fn labels(&self) -> Vec<u32> {
        self.scene.labels().iter().map(|&l| l as u32).collect()
    }

    /// Scene pixels as RGBA.
    pub fn image(&self) -> Result<Vec<u8>, JsError> {
        self.scene.image_rgba().map_err(js_err)
    }

    /// Heatmap RGBA for `class`; `toggles` is e.g. `C+A+U+Psi`.
    pub fn attribute(&mut self, class: usize, gamma: f64, toggles: &str) -> Result<Vec<u8>, JsError> {
        let toggles: Toggles = toggles.parse().map_err(js_err)?;
        let (px, stats) = self.scene.attribute(class, gamma, toggles).map_err(js_err)?;
        self.stats = Some(stats);
        Ok(px)
    }

    #[wasm_bindgen(js_name = positiveRatio)]
    pub fn positive_ratio(&self) -> f64 {
        self.stats.map_or(f64::NAN, |s| s.positive_ratio)
    }

    /// 1 for a hit, 0 for a miss, -1 when the class is absent from the scene.
    #[wasm_bindgen(js_name = pointingHit)]
    pub fn pointing_hit(&self) -> i32 {
        match self.stats.and_then(|s| s.pointing_hit) {
            Some(true) => 1,
            Some(false) => 0,
            None => -1,
        }
    }

    pub fn predicted(&self) -> i32 {
        self.stats.map_or(-1, |s| s.predicted as i32)
    }

    /// Insertion probe RGBA at `percent`; see [`Demo::morf_correct`].
    #[wasm_bindgen(js_name = morfPreview)]
    pub fn morf_preview(&mut self, percent: f64) -> Result<Vec<u8>, JsError> {
        let (px, correct) = self.scene.morf_preview(percent).map_err(js_err)?;
        self.morf_correct = correct;
        Ok(px)
    }

    /// Whether the latest probe is still classified as one of the scene's labels.
    #[wasm_bindgen(js_name = morfCorrect)]
    pub fn morf_correct(&self) -> bool {
        self.morf_correct
    }
}

//! Config-driven evaluation of several attribution methods over a dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, attribute_baseline, BaselineMethod, HedgeConfig, Toggles};
use crate::error::{Error, ErrorClass, Result};
use crate::layer::DEFAULT_EPSILON;
use crate::model::{load_model, ModelGraph};
use crate::tensor::Tensor;

use super::dataset::{generate_synthetic_dataset, load_dataset, AnnotatedSample, SynthConfig};
use super::metrics::{outside_inside_ratio, pointing_game, positive_ratio};
use super::morf::{insertion_steps, MorfConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Hedge,
    GenericLrp,
    LrpAb,
    GradActivation,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pointing,
    PositiveRatio,
    OutsideInside,
    Morf,
}

/// Which classes get explained per image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Predicted classes.
    #[default]
    P,
    /// Ground-truth labels.
    L,
}

/// How predicted classes are chosen in [`Mode::P`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionRule {
    /// `Threshold(0.5)` when any evaluated sample has several labels, else `Top1`.
    #[default]
    Auto,
    Top1,
    /// Every class whose softmax probability reaches the threshold
    /// (the top-1 class when none does).
    Threshold(f64),
}

fn default_methods() -> Vec<MethodName> {
    vec![MethodName::Hedge]
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Pointing, Metric::PositiveRatio, Metric::OutsideInside, Metric::Morf]
}

fn default_gammas() -> Vec<f64> {
    vec![1.0]
}

fn default_toggles() -> Vec<Toggles> {
    vec![Toggles::ALL]
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_alpha() -> f64 {
    2.0
}

fn default_beta() -> f64 {
    1.0
}

/// Benchmark description, usually read from JSON. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Generates the dataset instead of reading `dataset`.
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodName>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default = "default_toggles")]
    pub toggles: Vec<Toggles>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub prediction: PredictionRule,
    #[serde(default)]
    pub pointing_tolerance: usize,
    #[serde(default)]
    pub morf: MorfConfig,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Seeds the random-map baseline.
    #[serde(default)]
    pub seed: u64,
    /// Sample indices to evaluate (all when absent).
    #[serde(default)]
    pub subset: Option<Vec<usize>>,
    /// Caps the number of evaluated samples.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            model: None,
            dataset: None,
            synthetic: None,
            methods: default_methods(),
            metrics: default_metrics(),
            gammas: default_gammas(),
            toggles: default_toggles(),
            mode: Mode::P,
            prediction: PredictionRule::Auto,
            pointing_tolerance: 0,
            morf: MorfConfig::default(),
            epsilon: DEFAULT_EPSILON,
            alpha: default_alpha(),
            beta: default_beta(),
            seed: 0,
            subset: None,
            limit: None,
            jobs: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            field: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.model, &mut cfg.dataset].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.methods.is_empty() {
            return bad("methods", "no methods listed".into());
        }
        if self.metrics.is_empty() {
            return bad("metrics", "no metrics listed".into());
        }
        if self.methods.contains(&MethodName::Hedge) {
            if self.gammas.is_empty() || self.toggles.is_empty() {
                return bad("gammas", "hedge needs at least one gamma and one toggle set".into());
            }
            if let Some(g) = self.gammas.iter().find(|g| !(1.0..=2.0).contains(*g)) {
                return bad("gammas", format!("gamma {g} outside [1, 2]"));
            }
        }
        if let PredictionRule::Threshold(t) = self.prediction {
            if !(t > 0.0 && t <= 1.0) {
                return bad("prediction", format!("threshold {t} outside (0, 1]"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs", "must be at least 1".into());
        }
        self.morf.validate().map_err(|e| Error::Config {
            field: "morf".into(),
            message: e.to_string(),
        })
    }

    /// Every method variant: hedge expands over gammas x toggles.
    pub fn method_specs(&self) -> Vec<MethodSpec> {
        let mut specs = Vec::new();
        for m in &self.methods {
            match m {
                MethodName::Hedge => {
                    for &gamma in &self.gammas {
                        for &toggles in &self.toggles {
                            specs.push(MethodSpec::Hedge { gamma, toggles });
                        }
                    }
                }
                MethodName::GenericLrp => specs.push(MethodSpec::Baseline(BaselineMethod::GenericLrp)),
                MethodName::LrpAb => specs.push(MethodSpec::Baseline(BaselineMethod::LrpAlphaBeta {
                    alpha: self.alpha,
                    beta: self.beta,
                })),
                MethodName::GradActivation => specs.push(MethodSpec::Baseline(BaselineMethod::GradActivation)),
                MethodName::Random => specs.push(MethodSpec::Random),
            }
        }
        specs
    }
}

/// A concrete attribution method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodSpec {
    Hedge { gamma: f64, toggles: Toggles },
    Baseline(BaselineMethod),
    /// Uniform noise in `[-1, 1]`.
    Random,
}

impl MethodSpec {
    pub fn name(&self) -> String {
        match self {
            MethodSpec::Hedge { .. } => "hedge".into(),
            MethodSpec::Baseline(BaselineMethod::LrpAlphaBeta { .. }) => "lrp_ab".into(),
            MethodSpec::Baseline(b) => b.name(),
            MethodSpec::Random => "random".into(),
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match self {
            MethodSpec::Hedge { gamma, .. } => Some(*gamma),
            _ => None,
        }
    }

    pub fn toggles(&self) -> Option<Toggles> {
        match self {
            MethodSpec::Hedge { toggles, .. } => Some(*toggles),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            MethodSpec::Hedge { gamma, toggles } => format!("hedge(gamma={gamma}, {toggles})"),
            MethodSpec::Baseline(BaselineMethod::LrpAlphaBeta { alpha, beta }) => {
                format!("lrp_ab(alpha={alpha}, beta={beta})")
            }
            other => other.name(),
        }
    }
}

/// `H,W` attribution map of `target` for a normalized single-image input.
pub fn method_map(
    model: &ModelGraph,
    input: &Tensor,
    target: usize,
    spec: &MethodSpec,
    epsilon: f64,
    random_seed: u64,
) -> Result<Tensor> {
    match *spec {
        MethodSpec::Hedge { gamma, toggles } => {
            let cfg = HedgeConfig {
                gamma,
                epsilon,
                toggles,
                ..HedgeConfig::default()
            };
            Ok(attribute(model, input, target, &cfg)?.map)
        }
        MethodSpec::Baseline(b) => Ok(attribute_baseline(model, input, target, b, 1.0, epsilon)?.map),
        MethodSpec::Random => {
            let [_, _, h, w] = model.input_shape();
            let mut rng = ChaCha8Rng::seed_from_u64(random_seed);
            Ok(Tensor::from_fn(vec![h, w], |_| rng.random_range(-1.0..=1.0f32)))
        }
    }
}

/// One metric value for one (sample, target, method).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub sample: usize,
    pub target: usize,
    pub method: String,
    pub gamma: Option<f64>,
    pub toggles: Option<String>,
    pub mode: Mode,
    /// `pointing`, `positive_ratio`, `outside_inside` or `morf@<percent>`.
    pub metric: String,
    pub value: f64,
}

/// Mean of a metric for one method variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub gamma: Option<f64>,
    pub toggles: Option<String>,
    pub metric: String,
    pub mean: f64,
    pub count: usize,
}

/// A (sample, target, method) combination that produced no values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub sample: usize,
    pub target: usize,
    pub method: String,
    pub metric: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub mode: Mode,
    pub samples: Vec<usize>,
    pub rows: Vec<BenchmarkRow>,
    pub summary: Vec<SummaryRow>,
    pub skipped: Vec<Skipped>,
}

/// Loads the model and the dataset named by the config.
pub fn load_inputs(cfg: &BenchmarkConfig) -> Result<(ModelGraph, Vec<AnnotatedSample>)> {
    let model_path = cfg.model.as_ref().ok_or_else(|| Error::Config {
        field: "model".into(),
        message: "no model path given".into(),
    })?;
    let model = load_model(model_path)?;
    let samples = match (&cfg.synthetic, &cfg.dataset) {
        (Some(s), _) => generate_synthetic_dataset(s)?,
        (None, Some(d)) => load_dataset(d)?.0,
        (None, None) => {
            return Err(Error::Config {
                field: "dataset".into(),
                message: "neither dataset nor synthetic given".into(),
            })
        }
    };
    Ok((model, samples))
}

/// Runs every method variant and metric over the selected samples.
pub fn run_benchmark(cfg: &BenchmarkConfig, model: &ModelGraph, samples: &[AnnotatedSample]) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let mut selected: Vec<usize> = match &cfg.subset {
        Some(s) => s.clone(),
        None => (0..samples.len()).collect(),
    };
    if let Some(&i) = selected.iter().find(|&&i| i >= samples.len()) {
        return Err(Error::Config {
            field: "subset".into(),
            message: format!("index {i} out of range for {} samples", samples.len()),
        });
    }
    if let Some(limit) = cfg.limit {
        selected.truncate(limit);
    }
    if selected.is_empty() {
        return Err(Error::Config {
            field: "subset".into(),
            message: "no samples selected".into(),
        });
    }
    let [_, c, h, w] = model.input_shape();
    for &i in &selected {
        if samples[i].image.shape() != [1, c, h, w] {
            return Err(Error::shape(
                "benchmark sample",
                format!("sample {i} has shape {:?}, model expects [1, {c}, {h}, {w}]", samples[i].image.shape()),
            ));
        }
        if let Some(&l) = samples[i].labels.iter().find(|&&l| l >= model.num_classes()) {
            return Err(Error::InvalidClass {
                class: l,
                classes: model.num_classes(),
            });
        }
    }
    let specs = cfg.method_specs();
    let mut cfg = cfg.clone();
    if cfg.prediction == PredictionRule::Auto {
        let multi = selected.iter().any(|&i| samples[i].labels.len() > 1);
        cfg.prediction = if multi {
            PredictionRule::Threshold(0.5)
        } else {
            PredictionRule::Top1
        };
    }
    let cfg = &cfg;
    let outcomes = map_samples(cfg.jobs.unwrap_or(1), &selected, |i| {
        evaluate_sample(cfg, model, &samples[i], i, &specs)
    })?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (r, s) in outcomes {
        rows.extend(r);
        skipped.extend(s);
    }
    let summary = summarize(&rows);
    Ok(BenchmarkResult {
        mode: cfg.mode,
        samples: selected,
        rows,
        summary,
        skipped,
    })
}

type SampleOutcome = (Vec<BenchmarkRow>, Vec<Skipped>);

#[cfg(feature = "parallel")]
fn map_samples<F>(jobs: usize, idx: &[usize], f: F) -> Result<Vec<SampleOutcome>>
where
    F: Fn(usize) -> Result<SampleOutcome> + Sync,
{
    use rayon::prelude::*;
    if jobs <= 1 {
        return idx.iter().map(|&i| f(i)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| idx.par_iter().map(|&i| f(i)).collect())
}

#[cfg(not(feature = "parallel"))]
fn map_samples<F>(_jobs: usize, idx: &[usize], f: F) -> Result<Vec<SampleOutcome>>
where
    F: Fn(usize) -> Result<SampleOutcome>,
{
    idx.iter().map(|&i| f(i)).collect()
}

/// Classes explained for one sample under the configured mode.
pub fn explained_classes(cfg: &BenchmarkConfig, logits: &[f32], labels: &[usize]) -> Vec<usize> {
    match (cfg.mode, cfg.prediction) {
        (Mode::L, _) => labels.to_vec(),
        (Mode::P, PredictionRule::Top1 | PredictionRule::Auto) => vec![super::argmax(logits)],
        (Mode::P, PredictionRule::Threshold(t)) => {
            let max = logits.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
            let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let picked: Vec<usize> = (0..logits.len()).filter(|&k| exps[k] / z >= t).collect();
            if picked.is_empty() {
                vec![super::argmax(logits)]
            } else {
                picked
            }
        }
    }
}

fn evaluate_sample(
    cfg: &BenchmarkConfig,
    model: &ModelGraph,
    sample: &AnnotatedSample,
    index: usize,
    specs: &[MethodSpec],
) -> Result<SampleOutcome> {
    let input = model.normalize(&sample.image)?;
    let logits = model.forward(&input)?;
    let targets = explained_classes(cfg, logits.data(), &sample.labels);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for spec in specs {
        for &target in &targets {
            let row = |metric: String, value: f64| BenchmarkRow {
                sample: index,
                target,
                method: spec.name(),
                gamma: spec.gamma(),
                toggles: spec.toggles().map(|t| t.to_string()),
                mode: cfg.mode,
                metric,
                value,
            };
            let skip = |metric: Option<&str>, reason: String| Skipped {
                sample: index,
                target,
                method: spec.label(),
                metric: metric.map(str::to_string),
                reason,
            };
            let random_seed = cfg.seed ^ ((index as u64) << 20) ^ target as u64;
            let map = match method_map(model, &input, target, spec, cfg.epsilon, random_seed) {
                Ok(m) => m,
                Err(e) if e.class() == ErrorClass::Numeric => {
                    log::warn!("sample {index} target {target} {}: {e}", spec.label());
                    skipped.push(skip(None, e.to_string()));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mask = sample.mask_for(target);
            for metric in &cfg.metrics {
                match metric {
                    Metric::Pointing => {
                        let hit = match mask {
                            Some(m) => pointing_game(&map, m, cfg.pointing_tolerance)?,
                            None => false,
                        };
                        rows.push(row("pointing".into(), if hit { 1.0 } else { 0.0 }));
                    }
                    Metric::PositiveRatio => rows.push(row("positive_ratio".into(), positive_ratio(&map)?)),
                    Metric::OutsideInside => match mask {
                        Some(m) => match outside_inside_ratio(&map, m) {
                            Ok(v) => rows.push(row("outside_inside".into(), v)),
                            Err(e @ Error::UndefinedRatio(_)) => {
                                skipped.push(skip(Some("outside_inside"), e.to_string()));
                            }
                            Err(e) => return Err(e),
                        },
                        None => skipped.push(skip(Some("outside_inside"), "target is not a label".into())),
                    },
                    Metric::Morf => {
                        let steps = insertion_steps(model, &sample.image, &map, &sample.labels, &cfg.morf)?;
                        for (pct, ok) in cfg.morf.percents().into_iter().zip(steps) {
                            rows.push(row(format!("morf@{pct}"), if ok { 1.0 } else { 0.0 }));
                        }
                    }
                }
            }
        }
    }
    Ok((rows, skipped))
}

/// Means per (method, gamma, toggles, metric), in first-seen order.
pub fn summarize(rows: &[BenchmarkRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, Option<u64>, Option<String>, String)> = Vec::new();
    let mut acc: BTreeMap<usize, (f64, usize, Option<f64>)> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.gamma.map(f64::to_bits), r.toggles.clone(), r.metric.clone());
        let slot = match order.iter().position(|k| *k == key) {
            Some(p) => p,
            None => {
                order.push(key);
                order.len() - 1
            }
        };
        let e = acc.entry(slot).or_insert((0.0, 0, r.gamma));
        e.0 += r.value;
        e.1 += 1;
    }
    order
        .into_iter()
        .enumerate()
        .map(|(slot, (method, _, toggles, metric))| {
            let (sum, count, gamma) = acc[&slot];
            SummaryRow {
                method,
                gamma,
                toggles,
                metric,
                mean: sum / count as f64,
                count,
            }
        })
        .collect()
}

/// Mean of `metric` for rows whose method matches `pred`.
pub fn metric_mean(result: &BenchmarkResult, metric: &str, pred: impl Fn(&SummaryRow) -> bool) -> Option<f64> {
    result
        .summary
        .iter()
        .find(|s| s.metric == metric && pred(s))
        .map(|s| s.mean)
}

pub const CSV_HEADER: &str = "sample,target,method,gamma,toggles,mode,metric,value";

pub fn results_csv(result: &BenchmarkResult) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:?},{},{}",
            r.sample,
            r.target,
            r.method,
            r.gamma.map(|g| g.to_string()).unwrap_or_default(),
            r.toggles.as_deref().unwrap_or(""),
            r.mode,
            r.metric,
            r.value
        );
    }
    out
}

/// Writes `results.json` and `results.csv` into `dir`; returns both paths.
pub fn write_results(dir: impl AsRef<Path>, result: &BenchmarkResult) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("results.json");
    let mut json = serde_json::to_string_pretty(result).expect("results serialize");
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("results.csv");
    fs::write(&csv_path, results_csv(result)).map_err(|e| Error::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg = BenchmarkConfig::from_json(r#"{"model": "m.json", "mode": "L"}"#).unwrap();
        assert_eq!(cfg.mode, Mode::L);
        assert_eq!(cfg.methods, vec![MethodName::Hedge]);
        assert!(BenchmarkConfig::from_json(r#"{"modle": 1}"#).is_err());
        let bad = BenchmarkConfig {
            gammas: vec![2.5],
            ..BenchmarkConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn hedge_expands_over_gamma_and_toggles() {
        let cfg = BenchmarkConfig {
            methods: vec![MethodName::Hedge, MethodName::Random],
            gammas: vec![1.0, 1.5],
            toggles: Toggles::ABLATION_ROWS.to_vec(),
            ..BenchmarkConfig::default()
        };
        assert_eq!(cfg.method_specs().len(), 11);
    }

    #[test]
    fn threshold_rule_falls_back_to_top1() {
        let cfg = BenchmarkConfig {
            prediction: PredictionRule::Threshold(0.9),
            ..BenchmarkConfig::default()
        };
        assert_eq!(explained_classes(&cfg, &[0.0, 0.1, 0.0], &[0]), vec![1]);
        let cfg = BenchmarkConfig {
            prediction: PredictionRule::Threshold(0.4),
            ..BenchmarkConfig::default()
        };
        assert_eq!(explained_classes(&cfg, &[5.0, 5.0, -5.0], &[0]), vec![0, 1]);
    }

    #[test]
    fn summary_groups_rows() {
        let mk = |m: &str, v: f64| BenchmarkRow {
            sample: 0,
            target: 0,
            method: m.into(),
            gamma: None,
            toggles: None,
            mode: Mode::P,
            metric: "pointing".into(),
            value: v,
        };
        let s = summarize(&[mk("a", 1.0), mk("b", 0.0), mk("a", 0.0)]);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].mean, s[0].count), (0.5, 2));
    }
}

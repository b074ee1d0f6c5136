use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hedgegrad::eval::benchmark::{Metric, Mode};
use hedgegrad::eval::train::Preset;
use hedgegrad::eval::ShapeClass;
use hedgegrad::Toggles;

/// Gradient-hedging attribution, saliency evaluation and toy-model tooling.
#[derive(Debug, Parser)]
#[command(name = "hedgegrad", version)]
pub struct Cli {
    /// Write diagnostics to this file (nothing is logged otherwise).
    #[arg(long, global = true, value_name = "FILE")]
    pub log: Option<PathBuf>,

    /// Verbosity of the --log file.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,

    /// Random seed; falls back to 0 or the config file's seed.
    #[arg(long, global = true, env = "HEDGEGRAD_SEED")]
    pub seed: Option<u64>,

    /// Upper bound on worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attribute one image and write the map (GHT1) plus a JSON sidecar.
    Attribute(AttributeArgs),
    /// Run a benchmark config and write results.json / results.csv.
    Evaluate(EvaluateArgs),
    /// Cascading weight randomization with per-stage maps and correlations.
    Sanity(SanityArgs),
    /// Train a small CNN on generated shapes.
    TrainToy(TrainArgs),
    /// Generate an annotated synthetic shape dataset.
    GenData(GenDataArgs),
    /// Render a GHT1 map as a red/white/blue PNG.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Hedge,
    GenericLrp,
    LrpAb,
    GradActivation,
}

/// Options shared by commands that run a hedged attribution.
#[derive(Debug, Args)]
pub struct HedgeArgs {
    /// Evidence preservation factor in [1, 2].
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,

    /// Components to combine, e.g. `C+A+U+Psi`, `C+Psi`, `all`.
    #[arg(long, default_value = "all", value_parser = parse_toggles)]
    pub toggles: Toggles,

    /// Stabilizer added to denominators.
    #[arg(long, default_value_t = 1e-9)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    /// Model manifest (model.json).
    #[arg(long)]
    pub model: PathBuf,

    /// Input image (PNG or binary PPM).
    #[arg(long)]
    pub input: PathBuf,

    /// Class index or name to explain; the predicted class by default.
    #[arg(long)]
    pub target: Option<String>,

    #[arg(long, value_enum, default_value = "hedge")]
    pub method: MethodArg,

    #[command(flatten)]
    pub hedge: HedgeArgs,

    /// Alpha of the alpha-beta rule (alpha - beta = 1).
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,

    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,

    /// Output directory for attr.ght and attr.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,

    /// Also render the map to this PNG.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Benchmark config (JSON).
    #[arg(long)]
    pub config: PathBuf,

    /// Override the config's model.
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// Override the config's dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,

    /// Restrict to these metrics (repeatable).
    #[arg(long = "metric", value_parser = parse_metric)]
    pub metrics: Vec<Metric>,

    /// Number of MoRF insertion steps.
    #[arg(long)]
    pub steps: Option<usize>,

    /// Explain predicted (P) or labeled (L) classes.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,

    /// Evaluate at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,

    /// Output directory.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SanityArgs {
    #[arg(long)]
    pub model: PathBuf,

    #[arg(long)]
    pub input: PathBuf,

    /// Class index or name; the predicted class by default.
    #[arg(long)]
    pub target: Option<String>,

    #[command(flatten)]
    pub hedge: HedgeArgs,

    /// Layer indices in randomization order (default: weighted layers, last first).
    #[arg(long, value_delimiter = ',')]
    pub cascade: Option<Vec<usize>>,

    /// Output directory for sanity.json, stage maps and strip.png.
    #[arg(long, default_value = "sanity")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "tiny-cnn", value_parser = parse_preset)]
    pub preset: Preset,

    #[arg(long, default_value_t = 10)]
    pub epochs: usize,

    /// Train on a saved dataset instead of generating one.
    #[arg(long)]
    pub dataset: Option<PathBuf>,

    /// Number of generated training images.
    #[arg(long, default_value_t = 800)]
    pub samples: usize,

    /// Side length of generated images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,

    /// Share of generated images with two objects.
    #[arg(long, default_value_t = 0.3)]
    pub two_object_fraction: f64,

    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f32,

    /// Held-out accuracy a run must reach.
    #[arg(long, default_value_t = 0.9)]
    pub min_accuracy: f64,

    #[arg(long, default_value_t = 3)]
    pub max_attempts: usize,

    /// Output directory for model.json and weight blobs.
    #[arg(long, default_value = "model")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,

    #[arg(long, default_value_t = 32)]
    pub size: usize,

    #[arg(long, default_value_t = 0.0)]
    pub two_object_fraction: f64,

    /// Shape classes, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_shape)]
    pub classes: Option<Vec<ShapeClass>>,

    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// GHT1 map, `H,W` or `1,C,H,W` (channels are summed).
    #[arg(long)]
    pub input: PathBuf,

    #[arg(long)]
    pub out: PathBuf,
}

fn parse_toggles(s: &str) -> Result<Toggles, String> {
    s.parse().map_err(|e: hedgegrad::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: hedgegrad::Error| e.to_string())
}

fn parse_shape(s: &str) -> Result<ShapeClass, String> {
    s.parse().map_err(|e: hedgegrad::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown metric `{s}` (pointing, positive_ratio, outside_inside, morf)"))
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "P" | "p" => Ok(Mode::P),
        "L" | "l" => Ok(Mode::L),
        _ => Err(format!("unknown mode `{s}` (P or L)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn metric_and_mode_names() {
        assert_eq!(parse_metric("positive-ratio").unwrap(), Metric::PositiveRatio);
        assert_eq!(parse_metric("morf").unwrap(), Metric::Morf);
        assert!(parse_metric("auc").is_err());
        assert_eq!(parse_mode("L").unwrap(), Mode::L);
        assert!(parse_mode("X").is_err());
    }
}

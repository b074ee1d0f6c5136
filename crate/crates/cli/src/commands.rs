use std::fs;
use std::path::Path;

use hedgegrad::eval::benchmark::{load_inputs, run_benchmark, write_results, BenchmarkConfig, SummaryRow};
use hedgegrad::eval::dataset::{class_names, load_dataset, save_dataset};
use hedgegrad::eval::{generate_synthetic_dataset, sanity_check, train_toy_model, SynthConfig, TrainConfig};
use hedgegrad::imageio::read_image;
use hedgegrad::render::{render_heatmap, render_strip};
use hedgegrad::{attribute_baseline, load_model, save_model, BaselineMethod, HedgeConfig, ModelGraph, Tensor};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::args::{AttributeArgs, Cli, EvaluateArgs, GenDataArgs, HedgeArgs, MethodArg, RenderArgs, SanityArgs, TrainArgs};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn hedge_config(a: &HedgeArgs) -> Result<HedgeConfig> {
    let cfg = HedgeConfig {
        gamma: a.gamma,
        epsilon: a.epsilon,
        toggles: a.toggles,
        ..HedgeConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads an image, returning its normalized tensor and the raw file hash.
fn load_input(model: &ModelGraph, path: &Path) -> Result<(Tensor, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let image = read_image(path, model.input_shape()[1])?;
    Ok((model.normalize(&image)?, sha256_hex(&bytes)))
}

/// Class index from a number or class name; the model's prediction when absent.
fn resolve_target(model: &ModelGraph, target: Option<&str>, x: &Tensor) -> Result<usize> {
    let Some(t) = target else {
        let logits = model.forward(x)?;
        let d = logits.data();
        return Ok((0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best }));
    };
    if let Ok(i) = t.parse::<usize>() {
        return Ok(i);
    }
    model
        .class_names()
        .and_then(|names| names.iter().position(|n| n == t))
        .ok_or_else(|| CliError::usage(format!("unknown target class `{t}`")))
}

pub fn attribute(_cli: &Cli, a: &AttributeArgs) -> Result<()> {
    let cfg = hedge_config(&a.hedge)?;
    let model = load_model(&a.model)?;
    let (x, input_hash) = load_input(&model, &a.input)?;
    let target = resolve_target(&model, a.target.as_deref(), &x)?;

    let (map, mut meta) = match a.method {
        MethodArg::Hedge => {
            let r = hedgegrad::attribute(&model, &x, target, &cfg)?;
            let ledger: Vec<Value> = r
                .ledger
                .iter()
                .map(|e| json!({ "layer": e.layer, "sum": e.sum, "expected": e.expected }))
                .collect();
            let meta = json!({
                "method": "hedge",
                "gamma": cfg.gamma,
                "toggles": cfg.toggles.to_string(),
                "predicted": r.predicted,
                "logits": r.logits,
                "tau": r.tau,
                "ledger": ledger,
            });
            (r.map, meta)
        }
        method => {
            let m = match method {
                MethodArg::GenericLrp => BaselineMethod::GenericLrp,
                MethodArg::LrpAb => BaselineMethod::LrpAlphaBeta {
                    alpha: a.alpha,
                    beta: a.beta,
                },
                _ => BaselineMethod::GradActivation,
            };
            let r = attribute_baseline(&model, &x, target, m, 1.0, cfg.epsilon)?;
            let meta = json!({
                "method": m.name(),
                "predicted": r.predicted,
                "layer_sums": r.layer_sums,
            });
            (r.map, meta)
        }
    };

    create_dir(&a.out)?;
    let ght = map.to_ght_bytes();
    let ght_path = a.out.join("attr.ght");
    fs::write(&ght_path, &ght).map_err(|e| CliError::io(&ght_path, e))?;
    let extra = json!({
        "target": target,
        "target_name": model.class_names().map(|n| n[target].clone()),
        "epsilon": cfg.epsilon,
        "model_hash": model.content_hash(),
        "input": a.input.display().to_string(),
        "input_sha256": input_hash,
        "map_shape": map.shape(),
        "map_sha256": sha256_hex(&ght),
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    write_json(&a.out.join("attr.json"), &meta)?;
    if let Some(png) = &a.heatmap {
        render_heatmap(&map, png)?;
    }
    log::info!("attributed class {target} of {}", a.input.display());
    Ok(())
}

pub fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut cfg = BenchmarkConfig::read(&a.config)?;
    if let Some(m) = &a.model {
        cfg.model = Some(m.clone());
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
        cfg.synthetic = None;
    }
    if !a.metrics.is_empty() {
        cfg.metrics = a.metrics.clone();
    }
    if let Some(s) = a.steps {
        cfg.morf.steps = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(l) = a.limit {
        cfg.limit = Some(l);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    cfg.validate()?;
    let (model, samples) = load_inputs(&cfg)?;
    let result = run_benchmark(&cfg, &model, &samples)?;
    for s in &result.skipped {
        log::warn!("skipped {s:?}");
    }
    write_results(&a.out, &result)?;
    print!("{}", summary_table(&result.summary));
    Ok(())
}

fn summary_table(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.gamma.map_or("-".into(), |g| g.to_string()),
                r.toggles.clone().unwrap_or_else(|| "-".into()),
                r.metric.clone(),
                format!("{:.4}", r.mean),
                r.count.to_string(),
            ]
        })
        .collect();
    let header = ["method", "gamma", "toggles", "metric", "mean", "n"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    std::iter::once(&header)
        .chain(&cells)
        .map(|row| {
            let line: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            format!("{}\n", line.join("  ").trim_end())
        })
        .collect()
}

pub fn sanity(cli: &Cli, a: &SanityArgs) -> Result<()> {
    let cfg = hedge_config(&a.hedge)?;
    let seed = cli.seed.unwrap_or(0);
    let model = load_model(&a.model)?;
    let (x, input_hash) = load_input(&model, &a.input)?;
    let target = resolve_target(&model, a.target.as_deref(), &x)?;
    let report = sanity_check(&model, &x, target, a.cascade.as_deref(), seed, &cfg)?;

    create_dir(&a.out)?;
    let mut stages = Vec::with_capacity(report.stages.len());
    for (k, s) in report.stages.iter().enumerate() {
        let (ght, png) = (format!("stage_{k}.ght"), format!("stage_{k}.png"));
        s.map.write_ght(a.out.join(&ght))?;
        render_heatmap(&s.map, a.out.join(&png))?;
        stages.push(json!({
            "stage": k,
            "randomized": s.randomized,
            "correlation": s.correlation,
            "map": ght,
            "heatmap": png,
        }));
        println!("stage {k}: |pearson| {:.6}", s.correlation);
    }
    let maps: Vec<Tensor> = report.stages.iter().map(|s| s.map.clone()).collect();
    render_strip(&maps, a.out.join("strip.png"))?;
    write_json(
        &a.out.join("sanity.json"),
        &json!({
            "target": target,
            "seed": seed,
            "gamma": cfg.gamma,
            "toggles": cfg.toggles.to_string(),
            "epsilon": cfg.epsilon,
            "model_hash": model.content_hash(),
            "input_sha256": input_hash,
            "stages": stages,
        }),
    )
}

pub fn train_toy(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let (samples, classes) = match &a.dataset {
        Some(dir) => load_dataset(dir)?,
        None => {
            let synth = SynthConfig::new(a.samples, a.size, seed).with_two_objects(a.two_object_fraction);
            (generate_synthetic_dataset(&synth)?, class_names(&synth.classes))
        }
    };
    let cfg = TrainConfig {
        preset: a.preset,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        min_accuracy: a.min_accuracy,
        max_attempts: a.max_attempts,
        seed,
        ..TrainConfig::default()
    };
    let report = train_toy_model(&samples, classes.len(), &cfg)?;
    let model = report.model.with_class_names(classes)?;
    let manifest = save_model(&model, &a.out)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    write_json(
        &dir.join("train.json"),
        &json!({
            "preset": a.preset.name(),
            "epochs": a.epochs,
            "seed": seed,
            "epoch_losses": report.epoch_losses,
            "holdout_accuracy": report.holdout_accuracy,
            "attempts": report.attempts,
            "model_hash": model.content_hash(),
        }),
    )?;
    println!(
        "held-out accuracy {:.4} after {} attempt(s); model written to {}",
        report.holdout_accuracy,
        report.attempts,
        manifest.display()
    );
    Ok(())
}

pub fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let mut synth = SynthConfig::new(a.n, a.size, cli.seed.unwrap_or(0)).with_two_objects(a.two_object_fraction);
    if let Some(c) = &a.classes {
        synth.classes = c.clone();
    }
    let samples = generate_synthetic_dataset(&synth)?;
    save_dataset(&a.out, &samples, &class_names(&synth.classes))?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let t = Tensor::read_ght(&a.input)?;
    let map = match t.shape() {
        [_, _] => t,
        [1, _, _, _] => t.channel_sum()?,
        s => return Err(CliError::usage(format!("cannot render a tensor of shape {s:?}"))),
    };
    render_heatmap(&map, &a.out)?;
    Ok(())
}

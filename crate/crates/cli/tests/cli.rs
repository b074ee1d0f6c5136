use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hedgegrad::Tensor;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hedgegrad"));
    c.env_remove("HEDGEGRAD_SEED");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stderr.is_empty());
    out
}

/// A small dataset and trained model shared by all tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(dir.path(), &["gen-data", "--n", "6", "--two-object-fraction", "0.5", "--out", "data"]);
        ok(
            dir.path(),
            &["train-toy", "--preset", "micro-cnn", "--epochs", "3", "--samples", "200", "--min-accuracy", "0", "--out", "model"],
        );
        dir
    })
    .path()
}

fn scratch() -> (tempfile::TempDir, PathBuf) {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().to_path_buf();
    (t, p)
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Minimal GHT1 reader: magic, rank, extents, little-endian f32 data.
fn read_ght_raw(p: &Path) -> (Vec<usize>, Vec<f32>) {
    let b = fs::read(p).unwrap();
    assert_eq!(&b[..8], b"GHTENSR1");
    let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
    let rank = u32_at(8);
    let shape: Vec<usize> = (0..rank).map(|k| u32_at(12 + 4 * k)).collect();
    let start = 12 + 4 * rank;
    let data = b[start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    (shape, data)
}

fn pearson_abs(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum();
    let va: f64 = a.iter().map(|&x| (x as f64 - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|&y| (y as f64 - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        (cov / (va.sqrt() * vb.sqrt())).abs()
    }
}

#[test]
fn out_of_range_gamma_is_a_validation_error() {
    let f = fixture();
    let out = run(f, &["attribute", "--model", "model/model.json", "--input", "data/img_0000.png", "--gamma", "3", "--out", "never"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["code"], 2);
    assert!(!f.join("never").exists());
}

#[test]
fn exit_codes_by_error_class() {
    let f = fixture();
    let missing = run(f, &["attribute", "--model", "absent.json", "--input", "data/img_0000.png"]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(error_line(&missing)["kind"], "io");

    let unknown = run(f, &["attribute", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    error_line(&unknown);

    let (_t, d) = scratch();
    let failed = run(
        f,
        &["train-toy", "--preset", "micro-cnn", "--epochs", "1", "--samples", "40", "--learning-rate", "0", "--min-accuracy", "1.0", "--max-attempts", "1", "--out", arg(&d)],
    );
    assert_eq!(failed.status.code(), Some(4));
    assert_eq!(error_line(&failed)["kind"], "numeric");
}

#[test]
fn attribute_is_byte_identical_across_runs() {
    let f = fixture();
    let (_t, d) = scratch();
    for name in ["a", "b"] {
        let out = d.join(name);
        ok(
            f,
            &["attribute", "--model", "model/model.json", "--input", "data/img_0001.png", "--target", "1", "--out", arg(&out), "--heatmap", arg(&out.join("map.png"))],
        );
    }
    for file in ["attr.ght", "attr.json", "map.png"] {
        assert_eq!(fs::read(d.join("a").join(file)).unwrap(), fs::read(d.join("b").join(file)).unwrap(), "{file}");
    }
    let meta = read_json(&d.join("a/attr.json"));
    assert_eq!(meta["target"], 1);
    assert_eq!(meta["method"], "hedge");
    let (shape, _) = read_ght_raw(&d.join("a/attr.ght"));
    assert_eq!(shape, vec![32, 32]);
}

#[test]
fn baselines_run_from_the_command_line() {
    let f = fixture();
    let (_t, d) = scratch();
    for m in ["generic-lrp", "lrp-ab", "grad-activation"] {
        ok(f, &["attribute", "--model", "model/model.json", "--input", "data/img_0002.png", "--method", m, "--out", arg(&d.join(m))]);
        assert_eq!(read_ght_raw(&d.join(m).join("attr.ght")).0, vec![32, 32]);
    }
}

#[test]
fn sanity_artifacts_are_consistent() {
    let f = fixture();
    let (_t, d) = scratch();
    ok(f, &["--seed", "5", "sanity", "--model", "model/model.json", "--input", "data/img_0000.png", "--out", arg(&d.join("s"))]);
    ok(
        f,
        &["attribute", "--model", "model/model.json", "--input", "data/img_0000.png", "--out", arg(&d.join("a")), "--heatmap", arg(&d.join("a.png"))],
    );
    let report = read_json(&d.join("s/sanity.json"));
    let stages = report["stages"].as_array().unwrap();
    let manifest = read_json(&f.join("model/model.json"));
    let weighted = manifest["layers"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|l| matches!(l["kind"].as_str(), Some("conv2d" | "linear")))
        .count();
    assert_eq!(stages.len(), weighted + 1);
    assert_eq!(fs::read(d.join("s/stage_0.png")).unwrap(), fs::read(d.join("a.png")).unwrap());

    let (_, original) = read_ght_raw(&d.join("s/stage_0.ght"));
    for s in stages {
        let (_, map) = read_ght_raw(&d.join("s").join(s["map"].as_str().unwrap()));
        let want = pearson_abs(&original, &map);
        let got = s["correlation"].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
    assert!(d.join("s/strip.png").exists());
}

#[test]
fn evaluate_metric_selection_and_determinism() {
    let f = fixture();
    let (_t, d) = scratch();
    let cfg = d.join("bench.json");
    let model = f.join("model/model.json");
    let data = f.join("data");
    fs::write(
        &cfg,
        serde_json::json!({ "model": model, "dataset": data, "methods": ["hedge", "random"], "metrics": ["pointing"], "mode": "L" }).to_string(),
    )
    .unwrap();

    let out = ok(f, &["evaluate", "--config", arg(&cfg), "--out", arg(&d.join("p"))]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("method"));
    let csv = fs::read_to_string(d.join("p/results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(6) == Some("pointing")));

    ok(f, &["evaluate", "--config", arg(&cfg), "--metric", "morf", "--steps", "20", "--jobs", "2", "--out", arg(&d.join("m1"))]);
    let res = read_json(&d.join("m1/results.json"));
    for method in ["hedge", "random"] {
        let n = res["summary"].as_array().unwrap().iter().filter(|s| s["method"] == method).count();
        assert_eq!(n, 20);
    }
    ok(f, &["evaluate", "--config", arg(&cfg), "--metric", "morf", "--steps", "20", "--out", arg(&d.join("m2"))]);
    for file in ["results.json", "results.csv"] {
        assert_eq!(fs::read(d.join("m1").join(file)).unwrap(), fs::read(d.join("m2").join(file)).unwrap());
    }
}

#[test]
fn seed_comes_from_the_environment() {
    let (_t, d) = scratch();
    let gen = |seed: &str, out: &str| {
        let o = bin().current_dir(&d).env("HEDGEGRAD_SEED", seed).args(["gen-data", "--n", "2", "--out", out]).output().unwrap();
        assert!(o.status.success() && o.stderr.is_empty());
        fs::read(d.join(out).join("img_0000.png")).unwrap()
    };
    assert_eq!(gen("9", "a"), gen("9", "b"));
    assert_ne!(gen("9", "a"), gen("10", "c"));
}

#[test]
fn log_file_receives_diagnostics() {
    let f = fixture();
    let (_t, d) = scratch();
    let log = d.join("run.log");
    ok(f, &["--log", arg(&log), "attribute", "--model", "model/model.json", "--input", "data/img_0000.png", "--out", arg(&d)]);
    assert!(fs::read_to_string(&log).unwrap().contains("attributed class"));
}

#[test]
fn render_is_scale_invariant() {
    let (_t, d) = scratch();
    let map = Tensor::new(vec![2, 3], vec![0.0, 1.0, -2.0, 0.5, -0.25, 2.0]).unwrap();
    map.write_ght(d.join("m.ght")).unwrap();
    map.scale(2.0).write_ght(d.join("m2.ght")).unwrap();
    ok(&d, &["render", "--input", "m.ght", "--out", "m.png"]);
    ok(&d, &["render", "--input", "m2.ght", "--out", "m2.png"]);
    assert_eq!(fs::read(d.join("m.png")).unwrap(), fs::read(d.join("m2.png")).unwrap());
}

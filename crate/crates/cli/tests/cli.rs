use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use artiscope::config::RunConfig;
use artiscope::data::ClassTable;
use artiscope::metrics::{evaluate_predictions, EvalRecord};
use ndarray::Array2;
use serde_json::Value;

fn artiscope(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artiscope"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn quick_config(dir: &Path) {
    let mut cfg = RunConfig::toy();
    cfg.train.epochs = [15, 8, 8];
    fs::write(dir.join("toy.toml"), cfg.to_toml_string()).unwrap();
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    quick_config(dir);
    let c = ["--config", "toy.toml"];
    let run = |rest: &[&str]| artiscope(dir, &[&c[..], rest].concat());

    let out = ok(&run(&["synth", "--toy", "5", "--out-manifest", "data/manifest.jsonl"]));
    assert!(out.contains("wrote 20 samples"), "{out}");
    assert!(dir.join("data/manifest.config.toml").exists());

    let out = ok(&run(&["train", "--manifest", "data/manifest.jsonl", "--out", "run"]));
    assert!(out.contains("stage III"), "{out}");
    for f in ["final/checkpoint.json", "stage-II/params.safetensors", "train_log.jsonl", "anchor_stats.json", "config.toml"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    let first_step: Value = serde_json::from_str(fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["stage", "epoch", "step", "cls", "dice", "focal", "total"] {
        assert!(first_step.get(key).is_some(), "{key}");
    }

    let out = ok(&run(&["eval", "--checkpoint", "run/final", "--manifest", "data/manifest.jsonl", "--split", "test", "--out", "report.json"]));
    assert!(out.contains("S-AUPRO"), "{out}");
    let report = json(&dir.join("report.json"));
    assert_eq!(report["config"]["train"]["epochs"], serde_json::json!([15, 8, 8]));
    assert_eq!(report["per_class"].as_array().unwrap().len(), 3);

    let out = ok(&run(&["report", "--eval", "report.json", "--anchors", "run/anchor_stats.json", "--out", "rendered.json"]));
    assert!(out.contains("clean vs artifact (mean)"), "{out}");
    let rendered = json(&dir.join("rendered.json"));
    assert_eq!(rendered["metrics"], report);

    let img = "data/images/toy-lens_flare-0.png";
    ok(&run(&["predict", "--checkpoint", "run/final", "--out", "pred", img, "data/images/toy-clean-0.png", img]));
    let preds = json(&dir.join("pred/predictions.json"));
    let list = preds["predictions"].as_array().unwrap();
    assert_eq!(list.len(), 3);
    assert_eq!(list[0]["image"], img);
    assert_eq!(list[0]["probabilities"], list[2]["probabilities"]);
    let map = |i: usize| fs::read(dir.join(list[i]["anomaly_map"].as_str().unwrap())).unwrap();
    assert_eq!(map(0), map(2));
    assert_eq!(list[0]["masks"].as_object().unwrap().len(), 3);
    assert!(preds["config"].is_object());
}

#[test]
fn synthesis_is_reproducible_from_config_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    quick_config(dir);
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        let manifest = format!("{out}/m.jsonl");
        ok(&artiscope(dir, &["--config", "toy.toml", "--seed", seed, "synth", "--toy", "3", "--out-manifest", &manifest]));
    }
    let read = |p: &str| fs::read(dir.join(p)).unwrap();
    assert_eq!(read("a/m.jsonl"), read("b/m.jsonl"));
    assert_eq!(read("a/images/toy-moire-2.png"), read("b/images/toy-moire-2.png"));
    assert_ne!(read("a/images/toy-moire-2.png"), read("c/images/toy-moire-2.png"));
}

#[test]
fn exit_codes_separate_usage_data_and_numeric_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    quick_config(dir);
    let code = |args: &[&str]| artiscope(dir, args).status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["train"]), Some(1));
    assert_eq!(code(&["frobnicate"]), Some(1));
    fs::write(dir.join("bad.toml"), "[model]\nbeta = 3.0\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "config"]), Some(1));

    assert_eq!(code(&["--config", "toy.toml", "train", "--manifest", "missing.jsonl", "--out", "x"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", "nowhere", "--manifest", "missing.jsonl"]), Some(2));

    ok(&artiscope(dir, &["--config", "toy.toml", "synth", "--toy", "3", "--out-manifest", "data/m.jsonl"]));
    let mut cfg = RunConfig::toy();
    cfg.train.learning_rate = 1e300;
    cfg.train.grad_clip = 0.0;
    fs::write(dir.join("wild.toml"), cfg.to_toml_string()).unwrap();
    let out = artiscope(dir, &["--config", "wild.toml", "train", "--manifest", "data/m.jsonl", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn perfect_report_renders_seven_ones() {
    let classes = ClassTable::default();
    let records: Vec<EvalRecord> = (0..4)
        .map(|k| {
            let mask = Array2::from_shape_fn((4, 4), |(y, x)| k != 0 && y < 2 && x < 2);
            let mut probs = vec![0.0; 4];
            probs[k] = 1.0;
            EvalRecord {
                class_id: k,
                class_probs: probs,
                anomaly_map: mask.mapv(|m| if m { 1.0 } else { 0.0 }),
                mask,
            }
        })
        .collect();
    let report = evaluate_predictions(&records, &classes, 0.3).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("r.json"), report.to_json().unwrap()).unwrap();
    let out = ok(&artiscope(tmp.path(), &["report", "--eval", "r.json", "--out", "back.json"]));
    let mean = out.lines().find(|l| l.starts_with("mean")).unwrap();
    assert_eq!(mean.matches("1.000").count(), 7, "{mean}");
    assert_eq!(json(&tmp.path().join("back.json"))["metrics"], serde_json::to_value(&report).unwrap());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use artiscope::compositor::PatternBank;
use artiscope::config::{parse_stages, RunConfig, Stage};
use artiscope::data::{load_image, load_manifest, save_gray, DatasetManifest, Sample, Split, CLEAN};
use artiscope::metrics::{evaluate, generalization_split_eval, split_by_origin, MetricReport, PairedReport};
use artiscope::model::sub_seed;
use artiscope::prompt::AnchorSeparation;
use artiscope::synth::{load_clean_dir, synthesize_dataset, toy_dataset, write_dataset};
use artiscope::training::{load_checkpoint, train_full, Checkpoint};
use artiscope::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

const SYNTH_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

#[derive(Parser)]
#[command(name = "artiscope", version, about = "Synthesize, train, evaluate and apply artifact detectors")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Composite patterns onto clean images and write a manifest.
    Synth(SynthArgs),
    /// Run the configured training stages.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Classify images and write anomaly maps and masks.
    Predict(PredictArgs),
    /// Render an evaluation report and anchor statistics.
    Report(ReportArgs),
    /// Print the effective configuration as TOML.
    Config {
        /// Start from the small toy-backbone preset.
        #[arg(long)]
        toy: bool,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, required_unless_present = "toy")]
    clean_dir: Option<PathBuf>,
    #[arg(long, required_unless_present = "toy")]
    patterns: Option<PathBuf>,
    /// Directory of anchor masks named after the clean images.
    #[arg(long, required_unless_present = "toy")]
    anchors: Option<PathBuf>,
    #[arg(long)]
    out_manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    per_class_count: usize,
    /// Generate a procedural dataset with this many images per class instead.
    #[arg(long, conflicts_with_all = ["clean_dir", "patterns", "anchors"])]
    toy: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of I,II,III.
    #[arg(long)]
    stages: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    fpr_cap: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also score synthetic and real-captured samples separately.
    #[arg(long)]
    by_origin: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for maps, masks and `predictions.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report written by `eval`.
    #[arg(long)]
    eval: PathBuf,
    /// `anchor_stats.json` written by `train`.
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// Machine-readable copy of everything rendered.
    #[arg(long)]
    out: Option<PathBuf>,
}

type CliResult<T = ()> = Result<T, Error>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let log = |msg: &str| {
        if cli.verbose {
            eprintln!("{msg}");
        }
    };
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Synth(a) => synth(&config, a, &log),
        Command::Train(a) => train(config, a, &log),
        Command::Eval(a) => eval(cli.config.is_some().then_some(&config), a, &log),
        Command::Predict(a) => predict(a, &log),
        Command::Report(a) => report(a),
        Command::Config { toy } => {
            let mut cfg = if toy { RunConfig::toy() } else { config };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn usage(arg: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        arg,
        reason: reason.into(),
    }
}

fn to_json(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("serialisable output")
}

fn synth(config: &RunConfig, a: SynthArgs, log: &dyn Fn(&str)) -> CliResult {
    let classes = config.class_table()?;
    let seed = sub_seed(config.seed, SYNTH_STREAM);
    let samples: Vec<(Sample, Option<f64>)> = match a.toy {
        Some(n) => toy_dataset(&classes, n, config.model.input_size, seed)?,
        None => {
            let (clean_dir, patterns, anchors) = (a.clean_dir.unwrap(), a.patterns.unwrap(), a.anchors.unwrap());
            let clean = load_clean_dir(&clean_dir, &anchors)?;
            log(&format!("{} clean images", clean.len()));
            let bank = PatternBank::load(&patterns, &classes)?;
            log(&format!("{} patterns", bank.patterns.len()));
            let synthesized = synthesize_dataset(&clean, &bank, a.per_class_count, seed)?;
            clean
                .into_iter()
                .map(|(s, _)| (s, None))
                .chain(synthesized.into_iter().map(|s| (s.sample, Some(s.phi))))
                .collect()
        }
    };
    let manifest = write_dataset(
        &a.out_manifest,
        &classes,
        &samples,
        config.split,
        sub_seed(config.seed, SPLIT_STREAM),
    )?;
    write_text(&a.out_manifest.with_extension("config.toml"), &config.to_toml_string())?;
    println!("wrote {} samples to {}", manifest.len(), a.out_manifest.display());
    for (name, count) in manifest.class_histogram() {
        println!("  {name:<12} {count}");
    }
    Ok(())
}

fn load_split(config: &RunConfig, manifest: &Path, split: Split) -> CliResult<(DatasetManifest, Vec<Sample>)> {
    let m = load_manifest(manifest, &config.class_table()?)?;
    let samples = m.load_samples(Some(split))?;
    Ok((m, samples))
}

fn train(mut config: RunConfig, a: TrainArgs, log: &dyn Fn(&str)) -> CliResult {
    if let Some(s) = &a.stages {
        config.train.stages = parse_stages(s)?;
        if config.train.stages.is_empty() {
            return Err(usage("stages", "no stage given"));
        }
    }
    config.validate()?;
    let (m, train_set) = load_split(&config, &a.manifest, Split::Train)?;
    let val_set = m.load_samples(Some(Split::Val))?;
    log(&format!("{} training and {} validation samples", train_set.len(), val_set.len()));
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    write_text(&a.out.join("config.toml"), &config.to_toml_string())?;
    let outcome = train_full(&config, &train_set, &val_set, Some(&a.out))?;
    for (stage, stage_log) in &outcome.logs {
        let first = stage_log.epochs.first().map(|e| e.train.total);
        let last = stage_log.epochs.last().map(|e| e.train.total);
        match (first, last) {
            (Some(f), Some(l)) => println!("stage {stage:<3} {} epochs, loss {f:.4} -> {l:.4}", stage_log.epochs.len()),
            _ => println!("stage {stage:<3} skipped"),
        }
    }
    if let Some(stats) = &outcome.anchor_stats {
        write_text(&a.out.join("anchor_stats.json"), &to_json(&json!(stats)))?;
        println!(
            "clean/artifact anchor cosine {:.4} -> {:.4}",
            stats.clean_vs_artifact_before, stats.clean_vs_artifact_after
        );
    }
    println!(
        "pixel threshold {:.4}; checkpoint in {}",
        outcome.checkpoint.pixel_threshold(),
        a.out.join("final").display()
    );
    Ok(())
}

fn open_checkpoint(path: &Path, log: &dyn Fn(&str)) -> CliResult<Checkpoint> {
    let ck = load_checkpoint(path)?;
    log(&format!(
        "checkpoint {} (stages {:?})",
        path.display(),
        ck.completed_stages.iter().map(Stage::to_string).collect::<Vec<_>>()
    ));
    Ok(ck)
}

fn eval(config: Option<&RunConfig>, a: EvalArgs, log: &dyn Fn(&str)) -> CliResult {
    let split = Split::parse(&a.split)?;
    let ck = open_checkpoint(&a.checkpoint, log)?;
    let model = &ck.model;
    if let Some(cfg) = config {
        ck.check_classes(&cfg.class_table()?)?;
    }
    let fpr_cap = a.fpr_cap.unwrap_or(model.config.eval.fpr_cap);
    let m = load_manifest(&a.manifest, &model.classes)?;
    let samples = m.load_samples(Some(split))?;
    log(&format!("{} samples in split {}", samples.len(), a.split));
    let mut report = evaluate(model, &samples, fpr_cap)?;
    report.pixel_threshold = ck.pixel_threshold;
    println!("{}", report.render());
    let mut out = serde_json::to_value(&report).expect("report serialises");
    if a.by_origin {
        let (synthetic, real) = split_by_origin(&samples);
        let paired = generalization_split_eval(model, &synthetic, &real, fpr_cap)?;
        println!("{}", paired.render());
        out = json!({ "report": out, "by_origin": paired });
    }
    if let Some(path) = &a.out {
        write_text(path, &to_json(&out))?;
    }
    Ok(())
}

fn predict(a: PredictArgs, log: &dyn Fn(&str)) -> CliResult {
    let ck = open_checkpoint(&a.checkpoint, log)?;
    let model = &ck.model;
    let threshold = ck.pixel_threshold();
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let mut results = Vec::new();
    for (i, path) in a.images.iter().enumerate() {
        let image = load_image(path)?;
        let pred = model.predict(&image, None)?;
        let stem = format!(
            "{i:03}-{}",
            path.file_stem().and_then(|s| s.to_str()).unwrap_or("image")
        );
        let map = pred.anomaly_map();
        let map_path = a.out.join(format!("{stem}.anomaly.png"));
        save_gray(&map, &map_path)?;
        let winners = pred.pixel_argmax(false);
        let mut masks = serde_json::Map::new();
        for class in model.classes.iter().filter(|c| c.id != CLEAN) {
            let mut mask = map.clone();
            for ((y, x), v) in mask.indexed_iter_mut() {
                *v = if *v >= threshold && winners[[y, x]] == class.id { 1.0 } else { 0.0 };
            }
            let mask_path = a.out.join(format!("{stem}.mask.{}.png", class.name));
            save_gray(&mask, &mask_path)?;
            masks.insert(class.name.clone(), json!(mask_path));
        }
        let label = model.classes.name(pred.predicted_class()).unwrap_or("?").to_string();
        let probs: serde_json::Map<String, Value> = model
            .classes
            .iter()
            .map(|c| (c.name.clone(), json!(pred.class_probs[c.id])))
            .collect();
        println!("{}\t{label}\t{:.4}", path.display(), pred.class_probs[pred.predicted_class()]);
        results.push(json!({
            "image": path,
            "class": label,
            "probabilities": probs,
            "anomaly_map": map_path,
            "masks": masks,
        }));
    }
    let doc = json!({
        "pixel_threshold": threshold,
        "config": model.config,
        "predictions": results,
    });
    write_text(&a.out.join("predictions.json"), &to_json(&doc))
}

fn report(a: ReportArgs) -> CliResult {
    let text = read_text(&a.eval)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        location: a.eval.display().to_string(),
        reason: e.to_string(),
    })?;
    let (main, paired) = match value.get("report") {
        Some(r) => (r.clone(), value.get("by_origin").cloned()),
        None => (value, None),
    };
    let metrics = MetricReport::from_json(&main.to_string())?;
    println!("{}", metrics.render());
    let paired: Option<PairedReport> = paired
        .map(|p| {
            serde_json::from_value(p).map_err(|e| Error::Malformed {
                location: format!("{} by_origin", a.eval.display()),
                reason: e.to_string(),
            })
        })
        .transpose()?;
    if let Some(p) = &paired {
        println!("{}", p.render());
    }
    let anchors: Option<AnchorSeparation> = a
        .anchors
        .as_ref()
        .map(|path| {
            serde_json::from_str(&read_text(path)?).map_err(|e| Error::Malformed {
                location: path.display().to_string(),
                reason: e.to_string(),
            })
        })
        .transpose()?;
    if let Some(stats) = &anchors {
        let names: Vec<String> = match &metrics.config {
            Some(cfg) => cfg.class_table()?.iter().map(|c| c.name.clone()).collect(),
            None => Vec::new(),
        };
        println!("{}", stats.render(&names));
    }
    if let Some(path) = &a.out {
        let doc = json!({ "metrics": metrics, "by_origin": paired, "anchors": anchors });
        write_text(path, &to_json(&doc))?;
    }
    Ok(())
}

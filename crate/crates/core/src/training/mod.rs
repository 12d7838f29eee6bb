//! The three-stage training schedule.
//!
//! | stage | trains | scores with |
//! |---|---|---|
//! | I | adapters, projectors, both heads | heads |
//! | II | prompt words, injected tokens | live anchors |
//! | III | adapters, projectors | cached anchors |
//!
//! Every stage uses a fresh Adam optimiser, class-balanced batches and
//! global-norm gradient clipping. Stage II ends by caching the anchors, which
//! Stage III and inference then treat as constants.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::autograd::{Graph, Tensor};
use crate::config::{RunConfig, Stage};
use crate::data::{Origin, Sample, CLEAN};
use crate::error::{Error, Result};
use crate::metrics::f1_max;
use crate::model::{sub_rng, Model, Prepared, ScoreMode};
use crate::params::{ParamGroup, ParamId};
use crate::prompt::{anchor_separation_report, AnchorSeparation, AnchorSet};
use crate::scoring::{total_loss, LossBreakdown};

/// Parameter groups the optimiser may touch in `stage`.
pub fn trainable_parameters(stage: Stage) -> BTreeSet<ParamGroup> {
    use ParamGroup::*;
    match stage {
        Stage::I => [VisionAdapters, Projectors, ClassificationHead, SegmentationHead].into(),
        Stage::II => [PromptEmbeddings, InjectionTokens].into(),
        Stage::III => [VisionAdapters, Projectors].into(),
    }
}

pub fn score_mode(stage: Stage) -> ScoreMode {
    match stage {
        Stage::I => ScoreMode::Heads,
        Stage::II | Stage::III => ScoreMode::Anchors,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub class_balanced: bool,
    pub trainable_groups: BTreeSet<ParamGroup>,
}

impl StageConfig {
    pub fn from_run(cfg: &RunConfig, stage: Stage) -> Self {
        Self {
            stage,
            epochs: cfg.train.epochs[stage.index()],
            learning_rate: cfg.train.learning_rate,
            batch_size: cfg.train.batch_size,
            grad_clip: cfg.train.grad_clip,
            class_balanced: cfg.train.class_balanced,
            trainable_groups: trainable_parameters(stage),
        }
    }
}

/// One optimiser step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub cls: f64,
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl StageLog {
    pub fn write_jsonl(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[(ParamId, Tensor)]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.dim()), Tensor::zeros(g.dim())));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = model.store.get_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

/// Batches of sample indices for one epoch, `ceil(n / batch_size)` steps.
///
/// Balanced batches cycle through the classes present (from a random
/// offset) and draw within each class without replacement, reshuffling a
/// class once it is exhausted.
pub fn epoch_batches<R: Rng + ?Sized>(
    labels: &[usize],
    batch_size: usize,
    balanced: bool,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let n = labels.len();
    if n == 0 || batch_size == 0 {
        return Vec::new();
    }
    let steps = n.div_ceil(batch_size);
    if !balanced {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let mut queues: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut offset = rng.gen_range(0..classes.len());
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let c = classes[offset % classes.len()];
            offset += 1;
            let q = queues.entry(c).or_default();
            if q.is_empty() {
                *q = by_class[&c].clone();
                q.shuffle(rng);
            }
            batch.push(q.pop().expect("refilled"));
        }
        out.push(batch);
    }
    out
}

fn non_finite(stage: Stage, epoch: usize, step: usize, detail: impl Into<String>) -> Error {
    Error::NonFinite {
        stage: stage.to_string(),
        epoch,
        step,
        detail: detail.into(),
    }
}

/// Mean loss over `samples` in chunks of `chunk`.
pub fn mean_loss(model: &Model, samples: &[Prepared], mode: ScoreMode, chunk: usize) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::arg("samples", "no samples to evaluate"));
    }
    let parts: Vec<(usize, LossBreakdown)> = samples
        .par_chunks(chunk.max(1))
        .map(|c| {
            let batch: Vec<&Prepared> = c.iter().collect();
            model.loss(&batch, mode).map(|b| (c.len(), b))
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mut acc = [0.0; 3];
    for (k, b) in &parts {
        let w = *k as f64 / n;
        acc[0] += w * b.cls;
        acc[1] += w * b.dice;
        acc[2] += w * b.focal;
    }
    Ok(total_loss(acc[0], acc[1], acc[2], model.config.loss.lambda))
}

/// Runs one stage in place.
///
/// Only the stage's parameter groups change. Stage III needs anchors cached
/// by a previous Stage II; Stage II caches fresh anchors when it finishes.
pub fn run_stage(
    model: &mut Model,
    cfg: &StageConfig,
    train: &[Prepared],
    val: &[Prepared],
    rng: &mut ChaCha8Rng,
) -> Result<StageLog> {
    let stage = cfg.stage;
    if stage == Stage::III && model.anchors().is_none() {
        return Err(Error::Prerequisite {
            stage: stage.to_string(),
            reason: "no cached anchors; run Stage II first".into(),
        });
    }
    let mut log = StageLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if train.is_empty() {
        return Err(Error::Prerequisite {
            stage: stage.to_string(),
            reason: "training split is empty".into(),
        });
    }
    let mode = score_mode(stage);
    let groups = &cfg.trainable_groups;
    let has_params = groups.iter().any(|&g| model.store.scalar_count(g) > 0);
    if has_params {
        let live = model.needs_live_anchors(groups);
        let vision_frozen = !groups.contains(&ParamGroup::VisionAdapters) && !groups.contains(&ParamGroup::Projectors);
        let features: Option<Vec<(Arc<Tensor>, Arc<Tensor>)>> = if vision_frozen {
            Some(
                train
                    .par_iter()
                    .map(|p| model.features(&p.image).map(|(a, b)| (Arc::new(a), Arc::new(b))))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let labels: Vec<usize> = train.iter().map(|p| p.class_id).collect();
        let mut adam = Adam::new(cfg.learning_rate);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let mut sums = [0.0; 4];
            let batches = epoch_batches(&labels, cfg.batch_size, cfg.class_balanced, rng);
            for idx in &batches {
                let batch: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
                let feats: Option<Vec<_>> = features
                    .as_ref()
                    .map(|f| idx.iter().map(|&i| (Arc::clone(&f[i].0), Arc::clone(&f[i].1))).collect());
                let mut g = Graph::new();
                let bound = model.store.bind(&mut g, groups);
                let (loss, b) = model.batch_loss(&mut g, &bound, &batch, mode, live, feats.as_deref())?;
                if !b.total.is_finite() {
                    return Err(non_finite(stage, epoch, step, format!("loss {b:?}")));
                }
                let mut grads_all = g.backward(loss);
                let mut grads: Vec<(ParamId, Tensor)> = model
                    .store
                    .ids()
                    .filter(|&id| groups.contains(&model.store.entry(id).group))
                    .filter_map(|id| grads_all.take(bound.var(id)).map(|t| (id, t)))
                    .collect();
                let norm = clip_gradients(&mut grads, cfg.grad_clip);
                if !norm.is_finite() {
                    return Err(non_finite(stage, epoch, step, "gradient norm is not finite"));
                }
                adam.step(model, &grads);
                log.steps.push(StepRecord {
                    stage,
                    epoch,
                    step,
                    cls: b.cls,
                    dice: b.dice,
                    focal: b.focal,
                    total: b.total,
                });
                for (s, v) in sums.iter_mut().zip([b.cls, b.dice, b.focal, b.total]) {
                    *s += v;
                }
                step += 1;
            }
            let k = batches.len() as f64;
            let mut train_mean = total_loss(sums[0] / k, sums[1] / k, sums[2] / k, model.config.loss.lambda);
            train_mean.total = sums[3] / k;
            let val_total = if val.is_empty() || stage == Stage::II {
                None
            } else {
                Some(mean_loss(model, val, mode, cfg.batch_size)?.total)
            };
            log.epochs.push(EpochRecord {
                stage,
                epoch,
                train: train_mean,
                val_total,
            });
        }
    }
    if stage == Stage::II {
        let anchors = model.encode_anchors()?;
        model.set_anchors(Some(anchors));
    }
    Ok(log)
}

/// Drops the samples a configuration excludes from training.
pub fn training_subset(cfg: &RunConfig, samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| !(cfg.train.exclude_clean && s.class_id == CLEAN))
        .filter(|s| !(cfg.train.exclude_real && s.origin == Origin::Real))
        .cloned()
        .collect()
}

pub fn prepare_all(model: &Model, samples: &[Sample]) -> Result<Vec<Prepared>> {
    samples.par_iter().map(|s| model.prepare(s)).collect()
}

/// Threshold on the anomaly map maximising pixel F1 over `samples`.
pub fn calibrate_threshold(model: &Model, samples: &[Prepared]) -> Result<f64> {
    let per: Vec<(Vec<f64>, Vec<bool>)> = samples
        .par_iter()
        .map(|p| {
            let pred = model.predict(&p.image, None)?;
            let map = pred.anomaly_map();
            Ok((map.iter().copied().collect(), p.mask.0.iter().map(|&m| m != 0).collect()))
        })
        .collect::<Result<_>>()?;
    let (scores, labels): (Vec<f64>, Vec<bool>) =
        per.into_iter().flat_map(|(s, l)| s.into_iter().zip(l)).unzip();
    match f1_max(&scores, &labels) {
        Ok((_, t)) => Ok(t),
        Err(_) => Ok(0.5),
    }
}

/// State carried through the stage schedule.
pub struct Trainer {
    pub model: Model,
    pub rng: ChaCha8Rng,
    pub completed: Vec<Stage>,
    pub logs: Vec<(Stage, StageLog)>,
    pub initial_anchors: AnchorSet,
    pub pixel_threshold: Option<f64>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = Model::from_config(config)?;
        Self::with_model(model)
    }

    pub fn with_model(model: Model) -> Result<Self> {
        let initial_anchors = model.encode_anchors()?;
        let rng = sub_rng(model.config.seed, 10);
        Ok(Self {
            model,
            rng,
            completed: Vec::new(),
            logs: Vec::new(),
            initial_anchors,
            pixel_threshold: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let initial_anchors = match ck.initial_anchors {
            Some(a) => a,
            None => ck.model.encode_anchors()?,
        };
        Ok(Self {
            model: ck.model,
            rng: ck.rng,
            completed: ck.completed_stages,
            logs: Vec::new(),
            initial_anchors,
            pixel_threshold: ck.pixel_threshold,
        })
    }

    pub fn run(&mut self, stage: Stage, train: &[Prepared], val: &[Prepared]) -> Result<&StageLog> {
        let cfg = StageConfig::from_run(&self.model.config, stage);
        let log = run_stage(&mut self.model, &cfg, train, val, &mut self.rng)?;
        self.completed.push(stage);
        self.logs.push((stage, log));
        Ok(&self.logs.last().expect("pushed").1)
    }

    pub fn anchor_stats(&self) -> Option<AnchorSeparation> {
        let after = self.model.anchors()?;
        anchor_separation_report(&self.initial_anchors, after).ok()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            completed_stages: self.completed.clone(),
            rng: self.rng.clone(),
            pixel_threshold: self.pixel_threshold,
            initial_anchors: Some(self.initial_anchors.clone()),
        }
    }

    /// Runs the configured stages not yet completed, checkpointing into
    /// `out/stage-<name>` after each when `out` is given.
    pub fn run_remaining(&mut self, train: &[Prepared], val: &[Prepared], out: Option<&Path>) -> Result<()> {
        let stages: Vec<Stage> = self
            .model
            .config
            .train
            .stages
            .iter()
            .copied()
            .filter(|s| !self.completed.contains(s))
            .collect();
        for stage in stages {
            self.run(stage, train, val)?;
            if let Some(dir) = out {
                save_checkpoint(&self.checkpoint(), dir.join(format!("stage-{stage}")))?;
            }
        }
        Ok(())
    }
}

/// Everything a full run produces.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<(Stage, StageLog)>,
    pub anchor_stats: Option<AnchorSeparation>,
}

/// Checks that the training split holds every class the run expects.
fn check_coverage(model: &Model, train: &[Sample]) -> Result<()> {
    let present: BTreeSet<usize> = train.iter().map(|s| s.class_id).collect();
    for c in 0..model.class_count() {
        if c == CLEAN && model.config.train.exclude_clean {
            continue;
        }
        if !present.contains(&c) {
            return Err(Error::Prerequisite {
                stage: "training".into(),
                reason: format!("class `{}` missing from the training split", model.classes.name(c).unwrap_or("?")),
            });
        }
    }
    Ok(())
}

/// Runs the configured stages in order, then calibrates the pixel threshold
/// on `val` (or `train` when `val` is empty). With `out`, checkpoints go to
/// `out/stage-<name>` and `out/final`, and the step log to `out/train_log.jsonl`.
pub fn train_full(config: &RunConfig, train: &[Sample], val: &[Sample], out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    let subset = training_subset(&trainer.model.config, train);
    check_coverage(&trainer.model, &subset)?;
    let train_p = prepare_all(&trainer.model, &subset)?;
    let val_p = prepare_all(&trainer.model, val)?;
    trainer.run_remaining(&train_p, &val_p, out)?;
    let calib = if val_p.is_empty() { &train_p } else { &val_p };
    trainer.pixel_threshold = Some(calibrate_threshold(&trainer.model, calib)?);
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out {
        save_checkpoint(&checkpoint, dir.join("final"))?;
        let path = dir.join("train_log.jsonl");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        for (_, log) in &trainer.logs {
            log.write_jsonl(&mut f).map_err(|e| Error::io(&path, e))?;
        }
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        anchor_stats: trainer.anchor_stats(),
        logs: trainer.logs,
        checkpoint,
    })
}

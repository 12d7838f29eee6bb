//! Classification and segmentation metrics.
//!
//! Every threshold sweep uses the exact set of observed scores; a sample is
//! predicted positive when its score is `>=` the threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::data::{ClassTable, Mask, Origin, Sample, CLEAN};
use crate::error::{Error, Result};
use crate::model::{Model, ScoreMode};

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            context: "metric inputs",
            expected: format!("{} labels", scores.len()),
            actual: labels.len().to_string(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// `(threshold, tp, fp)` after admitting each distinct score, highest first.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let order = descending(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Area under the ROC curve as the Mann–Whitney statistic,
/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUROC needs both positive and negative labels".into()));
    }
    // Each tie group contributes its positives times the negatives ranked
    // strictly below, plus half the within-group pairs.
    let mut wins = 0.0;
    let mut prev = (0usize, 0usize);
    for (_, tp, fp) in sweep(scores, labels) {
        let (dp, dn) = (tp - prev.0, fp - prev.1);
        let below = neg - fp;
        wins += dp as f64 * below as f64 + 0.5 * dp as f64 * dn as f64;
        prev = (tp, fp);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision: `Σ (Rₙ − Rₙ₋₁)·Pₙ` over distinct thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in sweep(scores, labels) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Best F1 over all observed-score thresholds, with the lowest threshold
/// reaching it.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Metric("F1 needs at least one positive".into()));
    }
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for (t, tp, fp) in sweep(scores, labels) {
        let f1 = 2.0 * tp as f64 / (tp + fp + pos) as f64;
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

/// 8-connected components of `mask`; 0 is background, regions count from 1.
pub fn connected_regions(mask: &Array2<bool>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::zeros((h, w));
    let mut count = 0;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            count += 1;
            labels[[y, x]] = count;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Trapezoid area under `(x, y)` points (sorted by `x`) over `[0, cap]`,
/// interpolating at the cap. Only the span the points cover counts.
pub fn trapezoid_to_cap(points: &[(f64, f64)], cap: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let yc = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + yc) / 2.0;
        }
    }
    area
}

/// Normalised area under the per-region-overlap curve up to `fpr_cap`.
///
/// Each observed score is a threshold; it yields one point (global FPR, mean
/// overlap over all ground-truth regions). Regions are 8-connected.
pub fn aupro(maps: &[Array2<f64>], masks: &[Array2<bool>], fpr_cap: f64) -> Result<f64> {
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::arg("fpr_cap", format!("{fpr_cap} is outside (0, 1]")));
    }
    if maps.len() != masks.len() {
        return Err(Error::Shape {
            context: "aupro",
            expected: format!("{} masks", maps.len()),
            actual: masks.len().to_string(),
        });
    }
    let mut scores = Vec::new();
    let mut region_of = Vec::new();
    let mut sizes: Vec<usize> = vec![0];
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(Error::Shape {
                context: "aupro",
                expected: format!("{:?}", map.dim()),
                actual: format!("{:?}", mask.dim()),
            });
        }
        let (labels, n) = connected_regions(mask);
        let base = sizes.len() - 1;
        sizes.extend(std::iter::repeat_n(0, n));
        for (&s, &r) in map.iter().zip(labels.iter()) {
            let id = if r == 0 { 0 } else { base + r };
            sizes[id] += 1;
            scores.push(s);
            region_of.push(id);
        }
    }
    let regions = sizes.len() - 1;
    if regions == 0 {
        return Err(Error::Metric("AUPRO needs at least one ground-truth region".into()));
    }
    let negatives = sizes[0];
    if negatives == 0 {
        return Err(Error::Metric("AUPRO needs at least one negative pixel".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let order = descending(&scores);
    let mut covered = vec![0usize; sizes.len()];
    let (mut full, mut partial_regions, mut partial) = (0usize, 0usize, 0.0f64);
    let mut points = Vec::new();
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            match region_of[order[i]] {
                0 => fp += 1,
                r => {
                    let n = sizes[r];
                    if covered[r] > 0 {
                        partial -= covered[r] as f64 / n as f64;
                        partial_regions -= 1;
                    }
                    covered[r] += 1;
                    if covered[r] == n {
                        full += 1;
                    } else {
                        partial += covered[r] as f64 / n as f64;
                        partial_regions += 1;
                    }
                }
            }
            i += 1;
        }
        if partial_regions == 0 {
            partial = 0.0;
        }
        points.push((fp as f64 / negatives as f64, (full as f64 + partial) / regions as f64));
    }
    Ok(trapezoid_to_cap(&points, fpr_cap) / fpr_cap)
}

/// The seven metric columns. `None` where a metric is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub c_auroc: Option<f64>,
    pub c_ap: Option<f64>,
    pub c_f1: Option<f64>,
    pub s_auroc: Option<f64>,
    pub s_ap: Option<f64>,
    pub s_f1: Option<f64>,
    pub s_aupro: Option<f64>,
}

pub const COLUMNS: [&str; 7] = ["C-AUROC", "C-AP", "C-F1", "S-AUROC", "S-AP", "S-F1", "S-AUPRO"];

impl MetricRow {
    pub fn values(&self) -> [Option<f64>; 7] {
        [self.c_auroc, self.c_ap, self.c_f1, self.s_auroc, self.s_ap, self.s_f1, self.s_aupro]
    }

    fn set_classification(&mut self, scores: &[f64], labels: &[bool]) {
        self.c_auroc = auroc(scores, labels).ok();
        self.c_ap = average_precision(scores, labels).ok();
        self.c_f1 = f1_max(scores, labels).ok().map(|(f, _)| f);
    }

    fn set_segmentation(&mut self, maps: &[&Array2<f64>], masks: &[&Array2<bool>], fpr_cap: f64) {
        let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
        let labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
        self.s_auroc = auroc(&scores, &labels).ok();
        self.s_ap = average_precision(&scores, &labels).ok();
        self.s_f1 = f1_max(&scores, &labels).ok().map(|(f, _)| f);
        let maps: Vec<Array2<f64>> = maps.iter().map(|m| (*m).clone()).collect();
        let masks: Vec<Array2<bool>> = masks.iter().map(|m| (*m).clone()).collect();
        self.s_aupro = aupro(&maps, &masks, fpr_cap).ok();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub samples: usize,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Classification columns are the macro average over artifact classes.
    pub aggregate: MetricRow,
    /// Artifact-vs-clean classification with score `1 − ŷ_clean`.
    pub binary: MetricRow,
    pub per_class: Vec<ClassRow>,
    pub samples: usize,
    pub pixels: usize,
    pub fpr_cap: f64,
    pub pixel_threshold: Option<f64>,
    pub config: Option<RunConfig>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Aligned text table: one label column then the given value columns.
pub fn render_table(headers: &[&str], rows: &[(String, Vec<Option<f64>>)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(5);
    let col_w: Vec<usize> = headers.iter().map(|h| h.len().max(5)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "");
    for (h, w) in headers.iter().zip(&col_w) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for (label, values) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for (v, w) in values.iter().zip(&col_w) {
            let _ = write!(out, "  {:>w$}", cell(*v));
        }
        out.push('\n');
    }
    out
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Malformed {
            location: "metric report".into(),
            reason: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Malformed {
            location: "metric report".into(),
            reason: e.to_string(),
        })
    }

    /// Seven-column table: the macro row, the artifact-vs-clean row, then
    /// one row per artifact class.
    pub fn render(&self) -> String {
        let mut rows = vec![
            ("mean".to_string(), self.aggregate.values().to_vec()),
            ("artifact vs clean".to_string(), self.binary.values().to_vec()),
        ];
        for c in &self.per_class {
            rows.push((c.class.clone(), c.metrics.values().to_vec()));
        }
        render_table(&COLUMNS, &rows)
    }
}

/// What [`evaluate_predictions`] needs from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub class_id: usize,
    pub class_probs: Vec<f64>,
    pub anomaly_map: Array2<f64>,
    pub mask: Array2<bool>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics over precomputed predictions.
///
/// Classification is one-vs-rest per artifact class; segmentation pools every
/// pixel (clean samples add negatives only), while per-class segmentation
/// uses the samples of that class.
pub fn evaluate_predictions(records: &[EvalRecord], classes: &ClassTable, fpr_cap: f64) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Metric("nothing to evaluate".into()));
    }
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::arg("fpr_cap", format!("{fpr_cap} is outside (0, 1]")));
    }
    for r in records {
        if r.class_probs.len() != classes.len() || r.class_id >= classes.len() {
            return Err(Error::Shape {
                context: "evaluation record",
                expected: format!("{} class probabilities", classes.len()),
                actual: r.class_probs.len().to_string(),
            });
        }
    }
    let mut per_class = Vec::new();
    for k in classes.artifact_ids() {
        let labels: Vec<bool> = records.iter().map(|r| r.class_id == k).collect();
        let scores: Vec<f64> = records.iter().map(|r| r.class_probs[k]).collect();
        let mut row = MetricRow::default();
        row.set_classification(&scores, &labels);
        let own: Vec<&EvalRecord> = records.iter().filter(|r| r.class_id == k).collect();
        if !own.is_empty() {
            let maps: Vec<&Array2<f64>> = own.iter().map(|r| &r.anomaly_map).collect();
            let masks: Vec<&Array2<bool>> = own.iter().map(|r| &r.mask).collect();
            row.set_segmentation(&maps, &masks, fpr_cap);
        }
        per_class.push(ClassRow {
            class: classes.name(k).unwrap_or_default().to_string(),
            samples: own.len(),
            metrics: row,
        });
    }
    let mut aggregate = MetricRow {
        c_auroc: mean(per_class.iter().map(|c| c.metrics.c_auroc)),
        c_ap: mean(per_class.iter().map(|c| c.metrics.c_ap)),
        c_f1: mean(per_class.iter().map(|c| c.metrics.c_f1)),
        ..MetricRow::default()
    };
    let maps: Vec<&Array2<f64>> = records.iter().map(|r| &r.anomaly_map).collect();
    let masks: Vec<&Array2<bool>> = records.iter().map(|r| &r.mask).collect();
    aggregate.set_segmentation(&maps, &masks, fpr_cap);

    let mut binary = MetricRow::default();
    let labels: Vec<bool> = records.iter().map(|r| r.class_id != CLEAN).collect();
    let scores: Vec<f64> = records.iter().map(|r| 1.0 - r.class_probs[CLEAN]).collect();
    binary.set_classification(&scores, &labels);

    Ok(MetricReport {
        aggregate,
        binary,
        per_class,
        samples: records.len(),
        pixels: records.iter().map(|r| r.mask.len()).sum(),
        fpr_cap,
        pixel_threshold: None,
        config: None,
    })
}

fn mask_bool(m: &Mask) -> Array2<bool> {
    m.0.mapv(|v| v != 0)
}

/// Predictions for every sample at the model's input resolution.
pub fn collect_records(model: &Model, samples: &[Sample], mode: ScoreMode) -> Result<Vec<EvalRecord>> {
    samples
        .par_iter()
        .map(|s| {
            let p = model.prepare(s)?;
            let pred = model.predict_with(&p.image, s.object.as_deref(), mode)?;
            Ok(EvalRecord {
                class_id: s.class_id,
                anomaly_map: pred.anomaly_map(),
                class_probs: pred.class_probs,
                mask: mask_bool(&p.mask),
            })
        })
        .collect()
}

/// Full metric battery for `model` on `samples`.
///
/// Needs cached anchors unless the model was configured without Stage II,
/// and at least one sample of every class.
pub fn evaluate(model: &Model, samples: &[Sample], fpr_cap: f64) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Prerequisite {
            stage: "evaluation".into(),
            reason: "test split is empty".into(),
        });
    }
    if model.anchors().is_none() && model.config.train.stages.contains(&Stage::II) {
        return Err(Error::Prerequisite {
            stage: "evaluation".into(),
            reason: "model has no cached anchors".into(),
        });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.class_id).or_default() += 1;
    }
    for c in 0..model.class_count() {
        if !counts.contains_key(&c) {
            return Err(Error::Prerequisite {
                stage: "evaluation".into(),
                reason: format!("class `{}` has no samples in the test split", model.classes.name(c).unwrap_or("?")),
            });
        }
    }
    let records = collect_records(model, samples, model.mode())?;
    let mut report = evaluate_predictions(&records, &model.classes, fpr_cap)?;
    report.config = Some(model.config.clone());
    Ok(report)
}

/// Reports on the synthetic and real-captured subsets side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub synthetic: MetricReport,
    pub real: MetricReport,
}

impl PairedReport {
    pub fn render(&self) -> String {
        let pick = |r: &MetricRow| vec![r.c_ap, r.s_ap, r.s_f1];
        render_table(
            &["C-AP", "S-AP", "S-F1"],
            &[
                ("synthetic".into(), pick(&self.synthetic.aggregate)),
                ("real".into(), pick(&self.real.aggregate)),
            ],
        )
    }
}

/// Evaluates `synthetic` and `real` independently. Clean samples belong to
/// neither origin, so callers pass them in both subsets.
pub fn generalization_split_eval(
    model: &Model,
    synthetic: &[Sample],
    real: &[Sample],
    fpr_cap: f64,
) -> Result<PairedReport> {
    if synthetic.is_empty() || real.is_empty() {
        return Err(Error::Prerequisite {
            stage: "evaluation".into(),
            reason: "both origin subsets must be nonempty".into(),
        });
    }
    Ok(PairedReport {
        synthetic: evaluate(model, synthetic, fpr_cap)?,
        real: evaluate(model, real, fpr_cap)?,
    })
}

/// Splits a test set by origin, adding the clean samples to both halves.
pub fn split_by_origin(samples: &[Sample]) -> (Vec<Sample>, Vec<Sample>) {
    let pick = |o: Origin| {
        samples
            .iter()
            .filter(|s| s.origin == o || s.origin == Origin::Clean)
            .cloned()
            .collect::<Vec<_>>()
    };
    (pick(Origin::Synthetic), pick(Origin::Real))
}

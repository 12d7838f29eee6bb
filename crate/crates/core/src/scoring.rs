//! Heads, anchor scoring, patch-to-pixel upsampling and the loss battery.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::gaussian;
use crate::autograd::{BilinearPlan, Graph, Tensor, Var};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::prompt::AnchorSet;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 4.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::arg("lambda", format!("{} must be finite and >= 0", self.lambda)));
        }
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0) || !(self.dice_epsilon >= 0.0) {
            return Err(Error::arg("loss", "focal_gamma >= 0, focal_alpha > 0 and dice_epsilon >= 0 required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn total_loss(cls: f64, dice: f64, focal: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        cls,
        dice,
        focal,
        total: lambda * cls + dice + focal,
        lambda,
    }
}

/// Linear classification and segmentation heads over the embed space.
#[derive(Debug, Clone)]
pub struct Heads {
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
    pub seg_weight: ParamId,
    pub seg_bias: ParamId,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, embed_dim: usize, classes: usize, rng: &mut R) -> Self {
        let std = 1.0 / (embed_dim as f64).sqrt();
        Self {
            cls_weight: store.add("head.cls.weight", ParamGroup::ClassificationHead, gaussian(rng, (embed_dim, classes), std)),
            cls_bias: store.add("head.cls.bias", ParamGroup::ClassificationHead, Tensor::zeros((1, classes))),
            seg_weight: store.add("head.seg.weight", ParamGroup::SegmentationHead, gaussian(rng, (embed_dim, classes), std)),
            seg_bias: store.add("head.seg.bias", ParamGroup::SegmentationHead, Tensor::zeros((1, classes))),
        }
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var, what: &'static str) -> Result<Var> {
    let d = g.shape(x).1;
    if g.shape(w).0 != d {
        return Err(Error::shape(what, g.shape(w).0, d));
    }
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

/// `1 × (K+1)` logits from the global image feature.
pub fn classify_head(g: &mut Graph, f_image: Var, w: Var, b: Var) -> Result<Var> {
    linear(g, f_image, w, b, "classification head")
}

/// `N × (K+1)` logits, one row per patch token.
pub fn segment_head(g: &mut Graph, f_mg: Var, w: Var, b: Var) -> Result<Var> {
    linear(g, f_mg, w, b, "segmentation head")
}

/// `softmax(cos(x_r, E_c) / temperature)` for every row `x_r`.
pub fn cosine_softmax(g: &mut Graph, x: Var, anchors: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::arg("temperature", format!("{temperature} must be > 0")));
    }
    if g.shape(x).1 != g.shape(anchors).1 {
        return Err(Error::shape("embed dim", g.shape(anchors).1, g.shape(x).1));
    }
    let xn = g.l2_normalize_rows(x);
    let an = g.l2_normalize_rows(anchors);
    let at = g.transpose(an);
    let cos = g.matmul(xn, at);
    let logits = g.scale(cos, 1.0 / temperature);
    Ok(g.softmax_rows(logits))
}

/// Image-level and patch-level class probabilities against the anchors.
pub fn score_against_anchors(
    g: &mut Graph,
    f_image: Var,
    f_mg: Var,
    anchors: Var,
    temperature: f64,
) -> Result<(Var, Var)> {
    let class_probs = cosine_softmax(g, f_image, anchors, temperature)?;
    let patch_probs = cosine_softmax(g, f_mg, anchors, temperature)?;
    Ok((class_probs, patch_probs))
}

/// Plan mapping a patch grid onto an `H × W` pixel grid.
pub fn upsample_plan(grid: (usize, usize), target: (usize, usize)) -> Result<Arc<BilinearPlan>> {
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::arg("grid", "patch grid must be at least 1x1"));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::arg("target", format!("degenerate target size {target:?}")));
    }
    Ok(Arc::new(BilinearPlan::new(grid, target)))
}

/// Bilinear upsampling per class channel followed by per-pixel
/// renormalisation. Rows are pixels in row-major order.
pub fn upsample_patch_map(g: &mut Graph, patch_probs: Var, plan: &Arc<BilinearPlan>) -> Result<Var> {
    let n = g.shape(patch_probs).0;
    if n != plan.src.0 * plan.src.1 {
        return Err(Error::shape("patch map", plan.src.0 * plan.src.1, n));
    }
    let up = g.bilinear(patch_probs, Arc::clone(plan));
    Ok(g.normalize_rows_sum(up))
}

/// `−log ŷ_y` with `ŷ` clamped at 1e-12.
pub fn classification_loss(g: &mut Graph, class_probs: Var, label: usize) -> Result<Var> {
    let c = g.shape(class_probs).1;
    if label >= c {
        return Err(Error::arg("label", format!("{label} outside 0..{c}")));
    }
    let p = g.slice_cols(class_probs, label, label + 1);
    let lp = g.log_clamped(p, PROB_FLOOR);
    let s = g.sum(lp);
    Ok(g.scale(s, -1.0))
}

/// `(H·W) × (K+1)` one-hot targets: mask pixels take `class_id`, the rest
/// the clean class.
pub fn pixel_targets(mask: &Mask, class_id: usize, classes: usize) -> Result<Tensor> {
    if class_id >= classes {
        return Err(Error::arg("class_id", format!("{class_id} outside 0..{classes}")));
    }
    if class_id == 0 && !mask.is_empty() {
        return Err(Error::arg("mask", "clean class with a nonzero mask"));
    }
    let (h, w) = mask.dims();
    let mut t = Tensor::zeros((h * w, classes));
    for ((y, x), &m) in mask.0.indexed_iter() {
        t[[y * w + x, if m != 0 { class_id } else { 0 }]] = 1.0;
    }
    Ok(t)
}

/// Dice and focal losses of pixel probabilities against one-hot targets.
pub fn segmentation_loss(g: &mut Graph, pixel_probs: Var, targets: &Tensor, cfg: &LossConfig) -> Result<(Var, Var)> {
    if g.shape(pixel_probs) != targets.dim() {
        return Err(Error::shape("pixel targets", g.shape(pixel_probs), targets.dim()));
    }
    let t = g.input(targets.clone());
    let prod = g.mul(pixel_probs, t);
    let overlap = g.sum_rows(prod);
    let psum = g.sum_rows(pixel_probs);
    let tsum = g.sum_rows(t);
    let num = g.scale(overlap, 2.0);
    let num = g.add_scalar(num, cfg.dice_epsilon);
    let den = g.add(psum, tsum);
    let den = g.add_scalar(den, cfg.dice_epsilon);
    let ratio = g.div(num, den);
    let mean_ratio = g.mean(ratio);
    let neg = g.scale(mean_ratio, -1.0);
    let dice = g.add_scalar(neg, 1.0);

    let pt = g.sum_cols(prod);
    let one_minus = g.scale(pt, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let weight = g.powf(one_minus, cfg.focal_gamma);
    let logp = g.log_clamped(pt, PROB_FLOOR);
    let per_pixel = g.mul(weight, logp);
    let mean = g.mean(per_pixel);
    let focal = g.scale(mean, -cfg.focal_alpha);
    Ok((dice, focal))
}

/// `λ·cls + dice + focal` inside the graph.
pub fn combine_losses(g: &mut Graph, cls: Var, dice: Var, focal: Var, lambda: f64) -> Var {
    let c = g.scale(cls, lambda);
    let s = g.add(c, dice);
    g.add(s, focal)
}

/// Detached per-image predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub class_probs: Vec<f64>,
    /// `(g_h·g_w) × (K+1)`, row-major grid order.
    pub patch_probs: Tensor,
    pub grid: (usize, usize),
    /// `(H·W) × (K+1)`, row-major pixel order.
    pub pixel_probs: Tensor,
    pub size: (usize, usize),
}

impl Predictions {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.class_probs)
    }

    /// `1 − P(clean)` per pixel.
    pub fn anomaly_map(&self) -> Array2<f64> {
        let (h, w) = self.size;
        Array2::from_shape_fn((h, w), |(y, x)| (1.0 - self.pixel_probs[[y * w + x, 0]]).clamp(0.0, 1.0))
    }

    /// Most likely class per pixel.
    pub fn pixel_argmax(&self, include_clean: bool) -> Array2<usize> {
        let (h, w) = self.size;
        let start = usize::from(!include_clean);
        Array2::from_shape_fn((h, w), |(y, x)| {
            let row = self.pixel_probs.row(y * w + x);
            start + argmax(&row.as_slice().expect("standard layout")[start..])
        })
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Detached anchor scoring, convenient outside training.
pub fn score_values(
    f_image: &[f64],
    f_mg: &Tensor,
    anchors: &AnchorSet,
    temperature: f64,
    grid: (usize, usize),
    target: (usize, usize),
) -> Result<Predictions> {
    if f_mg.nrows() != grid.0 * grid.1 {
        return Err(Error::shape("patch tokens", grid.0 * grid.1, f_mg.nrows()));
    }
    let mut g = Graph::new();
    let fi = g.input(Tensor::from_shape_vec((1, f_image.len()), f_image.to_vec()).map_err(|e| Error::arg("f_image", e.to_string()))?);
    let fm = g.input(f_mg.clone());
    let a = g.input(anchors.anchors.clone());
    let (cp, pp) = score_against_anchors(&mut g, fi, fm, a, temperature)?;
    let plan = upsample_plan(grid, target)?;
    let px = upsample_patch_map(&mut g, pp, &plan)?;
    Ok(Predictions {
        class_probs: g.value(cp).iter().copied().collect(),
        patch_probs: g.value(pp).clone(),
        grid,
        pixel_probs: g.value(px).clone(),
        size: target,
    })
}

/// Detached upsampling of a patch probability map.
pub fn upsample_probs(patch_probs: &Tensor, grid: (usize, usize), target: (usize, usize)) -> Result<Tensor> {
    let plan = upsample_plan(grid, target)?;
    let mut g = Graph::new();
    let p = g.input(patch_probs.clone());
    let v = upsample_patch_map(&mut g, p, &plan)?;
    Ok(g.value(v).clone())
}

//! The assembled detector: frozen backbone, adapters, projectors, heads and
//! prompts, with graph-level and detached forward passes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{aggregate_multigranularity, attach_hooks, AdapterHooks, AdapterStack, ProjectorBank};
use crate::autograd::{BilinearPlan, Graph, Tensor, Var};
use crate::backbone::{load_pretrained, Backbone};
use crate::config::{BackboneSource, RunConfig};
use crate::data::{ClassTable, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::prompt::{build_prompts, encode_anchor_set, encode_prompts, injection_schedule, AnchorSet, DeepPromptSchedule, PromptBank};
use crate::scoring::{
    classification_loss, classify_head, combine_losses, pixel_targets, score_against_anchors, segment_head,
    segmentation_loss, upsample_patch_map, upsample_plan, LossBreakdown, Predictions, Heads,
};

/// Builds the backbone named by `source` for square inputs of `input_size`.
pub fn build_backbone(source: &BackboneSource, input_size: usize) -> Result<Backbone> {
    match source {
        BackboneSource::Toy(toy) => {
            if toy.patch_size == 0 || input_size % toy.patch_size != 0 {
                return Err(Error::Config(format!(
                    "input_size {input_size} is not a multiple of the toy patch size {}",
                    toy.patch_size
                )));
            }
            Ok(crate::backbone::ToyBackboneConfig { input_size, ..*toy }.build())
        }
        BackboneSource::Pretrained { path } => load_pretrained(path, Some(input_size)),
    }
}

/// Independent seed for subsystem `stream` of a root seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.next_u64()
}

pub(crate) fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream))
}

/// How class and patch probabilities are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Linear heads (Stage I, and models trained without Stages II/III).
    Heads,
    /// Cosine softmax against the text anchors.
    Anchors,
}

/// A sample resized to the model input with its pixel targets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub class_id: usize,
    pub targets: Tensor,
    pub cls_ids: Vec<usize>,
}

pub struct Model {
    pub backbone: Arc<Backbone>,
    /// Configuration with the variant applied.
    pub config: RunConfig,
    pub classes: ClassTable,
    pub store: ParamStore,
    pub adapters: AdapterStack,
    pub projectors: ProjectorBank,
    pub heads: Heads,
    pub prompts: PromptBank,
    pub schedule: DeepPromptSchedule,
    anchors: Option<AnchorSet>,
    plan: Arc<BilinearPlan>,
    object_anchors: RwLock<HashMap<Vec<usize>, AnchorSet>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            backbone: Arc::clone(&self.backbone),
            config: self.config.clone(),
            classes: self.classes.clone(),
            store: self.store.clone(),
            adapters: self.adapters.clone(),
            projectors: self.projectors.clone(),
            heads: self.heads.clone(),
            prompts: self.prompts.clone(),
            schedule: self.schedule.clone(),
            anchors: self.anchors.clone(),
            plan: Arc::clone(&self.plan),
            object_anchors: RwLock::new(HashMap::new()),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("variant", &self.config.variant)
            .field("params", &self.store.len())
            .field("anchors", &self.anchors.is_some())
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Freshly initialised trainable state on top of `backbone`.
    pub fn new(backbone: Arc<Backbone>, config: &RunConfig) -> Result<Self> {
        let vs = *backbone.vision_spec();
        let ts = *backbone.text_spec();
        let config = config.resolved(vs.layer_count);
        config.validate()?;
        let m = &config.model;
        if vs.input_size != m.input_size {
            return Err(Error::Config(format!(
                "backbone input size {} differs from configured {}",
                vs.input_size, m.input_size
            )));
        }
        if vs.embed_dim != ts.embed_dim {
            return Err(Error::Config(format!(
                "vision embed dim {} differs from text embed dim {}",
                vs.embed_dim, ts.embed_dim
            )));
        }
        if m.adapter_layers > vs.layer_count {
            return Err(Error::Config(format!(
                "adapter_layers {} exceeds the {} vision layers",
                m.adapter_layers, vs.layer_count
            )));
        }
        let classes = config.class_table()?;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let adapters = AdapterStack::new(&mut store, m.adapter_layers, vs.token_dim, m.beta, &mut sub_rng(seed, 1))?;
        let projectors =
            ProjectorBank::new(&mut store, &m.taps, vs.layer_count, vs.token_dim, vs.embed_dim, &mut sub_rng(seed, 2))
                .map_err(|e| Error::Config(e.to_string()))?;
        let heads = Heads::new(&mut store, vs.embed_dim, classes.len(), &mut sub_rng(seed, 3));
        let schedule = injection_schedule(&mut store, &ts, m.deep_prompt_j, m.deep_prompt_depth, sub_seed(seed, 5))
            .map_err(|e| Error::Config(e.to_string()))?;
        let cls = m.use_cls.then_some(m.cls_template.as_str());
        let prompts = build_prompts(
            &mut store,
            &backbone,
            cls,
            &m.artifact_names,
            m.prompt_length,
            schedule.prefix_len(),
            sub_seed(seed, 4),
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        let plan = upsample_plan(vs.patch_grid, (m.input_size, m.input_size))?;
        Ok(Self {
            backbone,
            config,
            classes,
            store,
            adapters,
            projectors,
            heads,
            prompts,
            schedule,
            anchors: None,
            plan,
            object_anchors: RwLock::new(HashMap::new()),
        })
    }

    /// Builds the backbone from the configuration and a fresh model on it.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let backbone = build_backbone(&config.backbone, config.model.input_size)?;
        Self::new(Arc::new(backbone), config)
    }

    pub fn input_size(&self) -> usize {
        self.config.model.input_size
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn anchors(&self) -> Option<&AnchorSet> {
        self.anchors.as_ref()
    }

    /// Caches frozen anchors; from now on predictions use them.
    pub fn set_anchors(&mut self, anchors: Option<AnchorSet>) {
        self.anchors = anchors;
        self.object_anchors.write().expect("anchor cache").clear();
    }

    pub fn mode(&self) -> ScoreMode {
        if self.anchors.is_some() {
            ScoreMode::Anchors
        } else {
            ScoreMode::Heads
        }
    }

    /// Anchors for the current prompt parameters (default description).
    pub fn encode_anchors(&self) -> Result<AnchorSet> {
        encode_anchor_set(&self.store, &self.prompts, &self.schedule, &self.backbone, None)
    }

    /// `[cls]` tokens for a sample's object description.
    pub fn cls_ids_for(&self, object: Option<&str>) -> Result<Vec<usize>> {
        let m = &self.config.model;
        if !m.use_cls {
            return Ok(Vec::new());
        }
        let Some(object) = object else {
            return Ok(self.prompts.cls_ids.clone());
        };
        let ids = self.backbone.tokenizer.encode(&m.object_template.replace("{object}", object));
        let v = self.backbone.text_spec().max_sequence;
        let prefix = self.schedule.prefix_len();
        let longest = (0..self.prompts.prompt_count())
            .map(|c| self.prompts.sequence_len(c, prefix, ids.len()))
            .max()
            .unwrap_or(0);
        if longest > v {
            return Err(Error::arg("object", format!("description `{object}` overflows the text context")));
        }
        Ok(ids)
    }

    pub fn resize_image(&self, image: &Image) -> Image {
        let s = self.input_size();
        if image.dims() == (s, s) {
            image.clone()
        } else {
            image.resize(s, s)
        }
    }

    pub fn prepare(&self, sample: &Sample) -> Result<Prepared> {
        if sample.class_id >= self.class_count() {
            return Err(Error::InvalidSample {
                id: sample.id.clone(),
                reason: format!("class {} outside the {}-class table", sample.class_id, self.class_count()),
            });
        }
        let s = self.input_size();
        let mask = if sample.mask.dims() == (s, s) { sample.mask.clone() } else { sample.mask.resize(s, s) };
        let targets = pixel_targets(&mask, sample.class_id, self.class_count()).map_err(|e| Error::InvalidSample {
            id: sample.id.clone(),
            reason: e.to_string(),
        })?;
        Ok(Prepared {
            id: sample.id.clone(),
            image: self.resize_image(&sample.image),
            mask,
            class_id: sample.class_id,
            targets,
            cls_ids: self.cls_ids_for(sample.object.as_deref())?,
        })
    }

    /// `(F_image, F_MG)` inside `g`: `1 × embed` and `N × embed` (unit rows).
    pub fn visual_features(&self, g: &mut Graph, bound: &Bound, image: &Image) -> Result<(Var, Var)> {
        let hooks_impl = AdapterHooks {
            stack: &self.adapters,
            bound,
        };
        let hooks = attach_hooks(&hooks_impl);
        let vision = &self.backbone.vision;
        let out = vision.forward(g, image, &hooks)?;
        let tapped: Vec<Var> = self
            .projectors
            .taps
            .iter()
            .map(|&t| vision.patch_tokens(g, out.layers[t - 1]))
            .collect();
        let proj: Vec<Var> = self.projectors.weights.iter().map(|&id| bound.var(id)).collect();
        let f_mg = aggregate_multigranularity(g, &tapped, &proj)?;
        Ok((out.global, f_mg))
    }

    /// Frozen anchors for the given `[cls]` tokens, memoised.
    fn frozen_anchors(&self, cls_ids: &[usize]) -> Result<AnchorSet> {
        let cached = self.anchors.as_ref().ok_or_else(|| Error::Prerequisite {
            stage: "inference".into(),
            reason: "model has no cached anchors".into(),
        })?;
        if cls_ids == self.prompts.cls_ids.as_slice() {
            return Ok(cached.clone());
        }
        if let Some(a) = self.object_anchors.read().expect("anchor cache").get(cls_ids) {
            return Ok(a.clone());
        }
        let a = encode_anchor_set(&self.store, &self.prompts, &self.schedule, &self.backbone, Some(cls_ids))?;
        self.object_anchors
            .write()
            .expect("anchor cache")
            .insert(cls_ids.to_vec(), a.clone());
        Ok(a)
    }

    /// Class and patch probabilities inside `g`.
    pub fn probabilities(
        &self,
        g: &mut Graph,
        bound: &Bound,
        f_image: Var,
        f_mg: Var,
        mode: ScoreMode,
        anchors: Option<Var>,
    ) -> Result<(Var, Var)> {
        match mode {
            ScoreMode::Heads => {
                let fi = g.l2_normalize_rows(f_image);
                let cl = classify_head(g, fi, bound.var(self.heads.cls_weight), bound.var(self.heads.cls_bias))?;
                let sl = segment_head(g, f_mg, bound.var(self.heads.seg_weight), bound.var(self.heads.seg_bias))?;
                Ok((g.softmax_rows(cl), g.softmax_rows(sl)))
            }
            ScoreMode::Anchors => {
                let a = anchors.ok_or_else(|| Error::Prerequisite {
                    stage: "scoring".into(),
                    reason: "anchor scoring without anchors".into(),
                })?;
                score_against_anchors(g, f_image, f_mg, a, self.config.model.temperature)
            }
        }
    }

    /// Mean loss over `batch` inside `g`.
    ///
    /// With `live_anchors` the anchors are re-encoded from the bound prompt
    /// parameters; otherwise the cached anchors enter as constants.
    /// `features` supplies precomputed `(F_image, F_MG)` per sample, which
    /// cuts the vision tower out of the graph.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[&Prepared],
        mode: ScoreMode,
        live_anchors: bool,
        features: Option<&[(Arc<Tensor>, Arc<Tensor>)]>,
    ) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::arg("batch", "empty batch"));
        }
        let lambda = self.config.loss.lambda;
        let mut anchor_vars: BTreeMap<Vec<usize>, Var> = BTreeMap::new();
        let mut totals = Vec::with_capacity(batch.len());
        let mut sums = [0.0; 3];
        for (i, p) in batch.iter().enumerate() {
            let (f_image, f_mg) = match features {
                Some(f) => (g.constant(Arc::clone(&f[i].0)), g.constant(Arc::clone(&f[i].1))),
                None => self.visual_features(g, bound, &p.image)?,
            };
            let anchors = match mode {
                ScoreMode::Heads => None,
                ScoreMode::Anchors => Some(match anchor_vars.get(&p.cls_ids) {
                    Some(&v) => v,
                    None => {
                        let v = if live_anchors {
                            encode_prompts(g, bound, &self.backbone, &self.prompts, &self.schedule, Some(&p.cls_ids))?
                        } else {
                            let a = self.frozen_anchors(&p.cls_ids)?;
                            g.input(a.anchors)
                        };
                        anchor_vars.insert(p.cls_ids.clone(), v);
                        v
                    }
                }),
            };
            let (cp, pp) = self.probabilities(g, bound, f_image, f_mg, mode, anchors)?;
            let px = upsample_patch_map(g, pp, &self.plan)?;
            let cls = classification_loss(g, cp, p.class_id)?;
            let (dice, focal) = segmentation_loss(g, px, &p.targets, &self.config.loss)?;
            sums[0] += g.scalar(cls);
            sums[1] += g.scalar(dice);
            sums[2] += g.scalar(focal);
            totals.push(combine_losses(g, cls, dice, focal, lambda));
        }
        let stacked = g.concat_rows(&totals);
        let loss = g.mean(stacked);
        let n = batch.len() as f64;
        let mut breakdown = crate::scoring::total_loss(sums[0] / n, sums[1] / n, sums[2] / n, lambda);
        breakdown.total = g.scalar(loss);
        Ok((loss, breakdown))
    }

    /// Whether anchors must be re-encoded for a given trainable set.
    pub fn needs_live_anchors(&self, trainable: &BTreeSet<ParamGroup>) -> bool {
        self.anchors.is_none()
            || trainable.contains(&ParamGroup::PromptEmbeddings)
            || trainable.contains(&ParamGroup::InjectionTokens)
    }

    /// Mean batch loss and its gradient for every parameter in `trainable`.
    pub fn loss_and_gradients(
        &self,
        batch: &[&Prepared],
        mode: ScoreMode,
        trainable: &BTreeSet<ParamGroup>,
    ) -> Result<(LossBreakdown, Vec<(ParamId, Tensor)>)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, trainable);
        let live = self.needs_live_anchors(trainable);
        let (loss, breakdown) = self.batch_loss(&mut g, &bound, batch, mode, live, None)?;
        let mut grads = g.backward(loss);
        let out = self
            .store
            .ids()
            .filter(|&id| trainable.contains(&self.store.entry(id).group))
            .map(|id| {
                let shape = self.store.get(id).dim();
                let grad = grads.take(bound.var(id)).unwrap_or_else(|| Tensor::zeros(shape));
                (id, grad)
            })
            .collect();
        Ok((breakdown, out))
    }

    /// Mean loss of `batch` under the current parameters, nothing trainable.
    pub fn loss(&self, batch: &[&Prepared], mode: ScoreMode) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, &BTreeSet::new());
        let live = self.anchors.is_none();
        self.batch_loss(&mut g, &bound, batch, mode, live, None).map(|(_, b)| b)
    }

    /// Detached `(F_image, F_MG)` for one input-sized image.
    pub fn features(&self, image: &Image) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, &BTreeSet::new());
        let (fi, fm) = self.visual_features(&mut g, &bound, &self.resize_image(image))?;
        Ok((g.value(fi).clone(), g.value(fm).clone()))
    }

    /// Predictions at the model input resolution.
    pub fn predict(&self, image: &Image, object: Option<&str>) -> Result<Predictions> {
        self.predict_with(image, object, self.mode())
    }

    pub fn predict_with(&self, image: &Image, object: Option<&str>, mode: ScoreMode) -> Result<Predictions> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, &BTreeSet::new());
        let (fi, fm) = self.visual_features(&mut g, &bound, &self.resize_image(image))?;
        let anchors = match mode {
            ScoreMode::Heads => None,
            ScoreMode::Anchors => {
                let cls = self.cls_ids_for(object)?;
                let a = match &self.anchors {
                    Some(_) => self.frozen_anchors(&cls)?,
                    None => encode_anchor_set(&self.store, &self.prompts, &self.schedule, &self.backbone, Some(&cls))?,
                };
                Some(g.input(a.anchors))
            }
        };
        let (cp, pp) = self.probabilities(&mut g, &bound, fi, fm, mode, anchors)?;
        let px = upsample_patch_map(&mut g, pp, &self.plan)?;
        let s = self.input_size();
        Ok(Predictions {
            class_probs: g.value(cp).iter().copied().collect(),
            patch_probs: g.value(pp).clone(),
            grid: self.backbone.vision_spec().patch_grid,
            pixel_probs: g.value(px).clone(),
            size: (s, s),
        })
    }

    /// Checksum of every trainable group plus the backbone.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = ParamGroup::ALL
            .iter()
            .map(|&g| (g.name().to_string(), self.store.checksum(g)))
            .collect();
        out.insert("backbone".into(), self.backbone.checksum());
        out
    }
}

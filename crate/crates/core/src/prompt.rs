//! Learnable text prompts, deep prompt injection and the anchor set.
//!
//! Prompt `c` is laid out as
//!
//! ```text
//! [prefix] [P^c_1 .. P^c_L] [cls words] [artifact words of c] [eot]
//! ```
//!
//! where `P^0 = N` (clean) and `P^k = A^k`. The prefix is a single start
//! token when no deep prompts are scheduled, and otherwise `J` slots that the
//! injected tokens overwrite at every designated layer, so the learnable
//! words themselves are never overwritten.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::gaussian;
use crate::autograd::{Graph, Tensor, Var};
use crate::backbone::{Backbone, TextBackboneSpec};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct PromptBank {
    /// Learnable words per prompt, `L`.
    pub length: usize,
    /// `L × token_dim` per prompt (index 0 clean, `k` artifact `k`). Empty
    /// when `L = 0`.
    pub learnable: Vec<ParamId>,
    /// Default object description tokens. Empty disables the `[cls]` words.
    pub cls_ids: Vec<usize>,
    /// Artifact-name tokens per artifact class (index 0 is artifact 1).
    pub artifact_ids: Vec<Vec<usize>>,
}

impl PromptBank {
    pub fn artifact_count(&self) -> usize {
        self.artifact_ids.len()
    }

    pub fn prompt_count(&self) -> usize {
        self.artifact_ids.len() + 1
    }

    /// Token count of prompt `c` for the given prefix and `[cls]` length.
    pub fn sequence_len(&self, c: usize, prefix: usize, cls_len: usize) -> usize {
        let artifact = if c == 0 { 0 } else { self.artifact_ids[c - 1].len() };
        prefix.max(1) + self.length + cls_len + artifact + 1
    }
}

/// Builds the clean and artifact prompts, registering `L × token_dim`
/// learnable words per prompt drawn from N(0, 0.02²).
///
/// `cls` is the object-level description (`None` drops the `[cls]` words);
/// `prefix` is the deep-prompt slot count that will precede each prompt.
pub fn build_prompts(
    store: &mut ParamStore,
    backbone: &Backbone,
    cls: Option<&str>,
    artifact_names: &[String],
    length: usize,
    prefix: usize,
    seed: u64,
) -> Result<PromptBank> {
    let tok = &backbone.tokenizer;
    let cls_ids = cls.map(|c| tok.encode(c)).unwrap_or_default();
    let artifact_ids: Vec<Vec<usize>> = artifact_names.iter().map(|n| tok.encode(&n.replace('_', " "))).collect();
    if let Some(i) = artifact_ids.iter().position(Vec::is_empty) {
        return Err(Error::arg("artifact_names", format!("`{}` has no tokens", artifact_names[i])));
    }
    let bank = PromptBank {
        length,
        learnable: Vec::new(),
        cls_ids,
        artifact_ids,
    };
    let v = backbone.text_spec().max_sequence;
    let longest = (0..bank.prompt_count())
        .map(|c| bank.sequence_len(c, prefix, bank.cls_ids.len()))
        .max()
        .unwrap_or(0);
    if longest > v {
        return Err(Error::arg(
            "prompt_length",
            format!("prompt of {longest} tokens exceeds the text context of {v}"),
        ));
    }
    let d = backbone.text_spec().token_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learnable = if length == 0 {
        Vec::new()
    } else {
        (0..bank.prompt_count())
            .map(|c| {
                let name = if c == 0 { "prompt.clean".to_string() } else { format!("prompt.artifact.{c}") };
                store.add(name, ParamGroup::PromptEmbeddings, gaussian(&mut rng, (length, d), PROMPT_INIT_STD))
            })
            .collect()
    };
    Ok(PromptBank { learnable, ..bank })
}

#[derive(Debug, Clone)]
pub struct DeepPromptSchedule {
    /// Tokens per designated layer.
    pub j: usize,
    pub layers: Vec<usize>,
    /// One `J × token_dim` block per designated layer.
    pub tokens: Vec<ParamId>,
}

impl DeepPromptSchedule {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Slots each prompt reserves for the injected tokens.
    pub fn prefix_len(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.j
        }
    }
}

/// Fresh `J × token_dim` tokens for each of layers `1..=depth`. `J = 0` or
/// `depth = 0` yields the empty schedule.
pub fn injection_schedule(
    store: &mut ParamStore,
    spec: &TextBackboneSpec,
    j: usize,
    depth: usize,
    seed: u64,
) -> Result<DeepPromptSchedule> {
    if j >= spec.max_sequence {
        return Err(Error::arg("deep_prompt_j", format!("J = {j} must be < V = {}", spec.max_sequence)));
    }
    if depth > spec.layer_count {
        return Err(Error::arg(
            "deep_prompt_depth",
            format!("{depth} exceeds the {} text layers", spec.layer_count),
        ));
    }
    if j == 0 || depth == 0 {
        return Ok(DeepPromptSchedule {
            j,
            layers: Vec::new(),
            tokens: Vec::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers: Vec<usize> = (1..=depth).collect();
    let tokens = layers
        .iter()
        .map(|l| {
            store.add(
                format!("deep_prompt.{l}"),
                ParamGroup::InjectionTokens,
                gaussian(&mut rng, (j, spec.token_dim), PROMPT_INIT_STD),
            )
        })
        .collect();
    Ok(DeepPromptSchedule { j, layers, tokens })
}

/// Input token rows of prompt `c` inside `g`.
fn prompt_tokens(
    g: &mut Graph,
    bound: &Bound,
    backbone: &Backbone,
    bank: &PromptBank,
    prefix: usize,
    c: usize,
    cls_ids: &[usize],
) -> Result<Var> {
    let text = &backbone.text;
    let tok = &backbone.tokenizer;
    let mut parts = vec![g.input(text.embed_tokens(&vec![tok.start_token; prefix.max(1)])?)];
    if let Some(&id) = bank.learnable.get(c) {
        parts.push(bound.var(id));
    }
    let mut tail: Vec<usize> = cls_ids.to_vec();
    if c > 0 {
        tail.extend(&bank.artifact_ids[c - 1]);
    }
    tail.push(tok.end_token);
    parts.push(g.input(text.embed_tokens(&tail)?));
    Ok(g.concat_rows(&parts))
}

/// Encodes every prompt and returns the L2-normalised `(K+1) × embed_dim`
/// anchors as a graph variable. `cls_ids` overrides the bank's default
/// object description.
pub fn encode_prompts(
    g: &mut Graph,
    bound: &Bound,
    backbone: &Backbone,
    bank: &PromptBank,
    schedule: &DeepPromptSchedule,
    cls_ids: Option<&[usize]>,
) -> Result<Var> {
    let cls_ids = cls_ids.unwrap_or(&bank.cls_ids);
    let injections: BTreeMap<usize, Var> = schedule
        .layers
        .iter()
        .zip(&schedule.tokens)
        .map(|(&l, &id)| (l, bound.var(id)))
        .collect();
    let prefix = schedule.prefix_len();
    let mut rows = Vec::with_capacity(bank.prompt_count());
    for c in 0..bank.prompt_count() {
        let tokens = prompt_tokens(g, bound, backbone, bank, prefix, c, cls_ids)?;
        rows.push(backbone.text.encode(g, tokens, &injections)?);
    }
    let stacked = g.concat_rows(&rows);
    Ok(g.l2_normalize_rows(stacked))
}

/// Unit-norm text anchors, row 0 clean and row `k` artifact class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Tensor,
}

impl AnchorSet {
    pub fn new(anchors: Tensor) -> Self {
        Self { anchors }
    }

    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.nrows() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.anchors.ncols()
    }
}

/// Anchor set for the current parameter values.
pub fn encode_anchor_set(
    store: &ParamStore,
    bank: &PromptBank,
    schedule: &DeepPromptSchedule,
    backbone: &Backbone,
    cls_ids: Option<&[usize]>,
) -> Result<AnchorSet> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g, &Default::default());
    let v = encode_prompts(&mut g, &bound, backbone, bank, schedule, cls_ids)?;
    Ok(AnchorSet::new(g.value(v).clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPair {
    pub a: usize,
    pub b: usize,
    pub before: f64,
    pub after: f64,
}

/// Cosine statistics of two anchor sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSeparation {
    /// Mean cosine between the clean anchor and the artifact anchors.
    pub clean_vs_artifact_before: f64,
    pub clean_vs_artifact_after: f64,
    /// Clean-vs-artifact cosine per artifact class `k = 1..=K`.
    pub per_artifact_before: Vec<f64>,
    pub per_artifact_after: Vec<f64>,
    pub pairwise: Vec<ArtifactPair>,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let n = (a.dot(&a) * b.dot(&b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        a.dot(&b) / n
    }
}

pub fn anchor_separation_report(before: &AnchorSet, after: &AnchorSet) -> Result<AnchorSeparation> {
    if before.anchors.dim() != after.anchors.dim() {
        return Err(Error::shape("anchor sets", before.anchors.dim(), after.anchors.dim()));
    }
    if before.len() < 2 {
        return Err(Error::arg("anchors", "need a clean and at least one artifact anchor"));
    }
    let k = before.len() - 1;
    let per = |s: &AnchorSet| -> Vec<f64> {
        (1..=k).map(|c| cosine(s.anchors.row(0), s.anchors.row(c))).collect()
    };
    let per_before = per(before);
    let per_after = per(after);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut pairwise = Vec::new();
    for a in 1..=k {
        for b in a + 1..=k {
            pairwise.push(ArtifactPair {
                a,
                b,
                before: cosine(before.anchors.row(a), before.anchors.row(b)),
                after: cosine(after.anchors.row(a), after.anchors.row(b)),
            });
        }
    }
    Ok(AnchorSeparation {
        clean_vs_artifact_before: mean(&per_before),
        clean_vs_artifact_after: mean(&per_after),
        per_artifact_before: per_before,
        per_artifact_after: per_after,
        pairwise,
    })
}

impl AnchorSeparation {
    /// Aligned text table; `names[k]` labels class `k`.
    pub fn render(&self, names: &[String]) -> String {
        let label = |k: usize| names.get(k).cloned().unwrap_or_else(|| format!("class {k}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>8} {:>8}", "cosine", "before", "after");
        let _ = writeln!(
            out,
            "{:<28} {:>8.4} {:>8.4}",
            "clean vs artifact (mean)", self.clean_vs_artifact_before, self.clean_vs_artifact_after
        );
        for (k, (b, a)) in self.per_artifact_before.iter().zip(&self.per_artifact_after).enumerate() {
            let _ = writeln!(out, "{:<28} {:>8.4} {:>8.4}", format!("{} vs {}", label(0), label(k + 1)), b, a);
        }
        for p in &self.pairwise {
            let _ = writeln!(out, "{:<28} {:>8.4} {:>8.4}", format!("{} vs {}", label(p.a), label(p.b)), p.before, p.after);
        }
        out
    }
}

/// Row norms of an anchor matrix.
pub fn anchor_norms(anchors: &Tensor) -> Vec<f64> {
    anchors.map_axis(Axis(1), |r| r.dot(&r).sqrt()).to_vec()
}

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::transformer::{LayerNorm, ResidualBlock};
use crate::autograd::{Activation, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBackboneSpec {
    pub layer_count: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Maximum sequence length `V`.
    pub max_sequence: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

/// Word-level tokenizer. Known words map through the vocabulary; anything
/// else is hashed into the id space (never onto the start/end tokens).
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: HashMap<String, usize>,
    pub vocab_size: usize,
    pub start_token: usize,
    pub end_token: usize,
}

impl Tokenizer {
    pub fn new(vocab: &[String], vocab_size: usize, start_token: usize, end_token: usize) -> Self {
        let words = vocab
            .iter()
            .enumerate()
            .filter(|(i, w)| !w.is_empty() && *i < vocab_size)
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            words,
            vocab_size,
            start_token,
            end_token,
        }
    }

    pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric() && c != '\'')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
    }

    pub fn token_id(&self, word: &str) -> usize {
        if let Some(&id) = self.words.get(word) {
            return id;
        }
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut id = (h % self.vocab_size as u64) as usize;
        while id == self.start_token || id == self.end_token {
            id = (id + 1) % self.vocab_size;
        }
        id
    }

    /// Token ids for `text`, without start/end markers.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        Self::words(text).map(|w| self.token_id(&w)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub spec: TextBackboneSpec,
    pub activation: Activation,
    pub token_embedding: Arc<Tensor>,
    pub positional: Arc<Tensor>,
    pub blocks: Vec<ResidualBlock>,
    pub ln_final: LayerNorm,
    /// `token_dim × embed_dim`.
    pub projection: Arc<Tensor>,
}

impl TextEncoder {
    /// Frozen embeddings for a list of token ids, `len × token_dim`.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let d = self.spec.token_dim;
        let mut out = Tensor::zeros((ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.spec.vocab_size {
                return Err(Error::arg("token", format!("id {id} outside vocabulary")));
            }
            out.row_mut(r).assign(&self.token_embedding.row(id));
        }
        Ok(out)
    }

    /// Runs the causal text transformer over `tokens` (`V×token_dim`).
    ///
    /// At every layer `h` present in `injections`, the first `J` rows of that
    /// layer's input are replaced by the injected `J×token_dim` block. The
    /// transformed prefix that comes out of the layer is discarded at the next
    /// injected layer. The final-position token is pooled and projected.
    pub fn encode(&self, g: &mut Graph, tokens: Var, injections: &BTreeMap<usize, Var>) -> Result<Var> {
        let (v, d) = g.shape(tokens);
        if d != self.spec.token_dim {
            return Err(Error::shape("text tokens", self.spec.token_dim, d));
        }
        if v == 0 || v > self.spec.max_sequence {
            return Err(Error::arg(
                "tokens",
                format!("sequence length {v} outside 1..={}", self.spec.max_sequence),
            ));
        }
        let mut j = None;
        for (&layer, &inj) in injections {
            if layer == 0 || layer > self.spec.layer_count {
                return Err(Error::arg(
                    "injections",
                    format!("layer {layer} outside 1..={}", self.spec.layer_count),
                ));
            }
            let (rows, cols) = g.shape(inj);
            if cols != d {
                return Err(Error::shape("injection tokens", d, cols));
            }
            if *j.get_or_insert(rows) != rows {
                return Err(Error::arg("injections", "layers inject different token counts"));
            }
        }
        let j = j.unwrap_or(0);
        if j >= v {
            return Err(Error::arg("injections", format!("J = {j} must be < V = {v}")));
        }

        let pos = g.constant(Arc::clone(&self.positional));
        let pos = g.slice_rows(pos, 0, v);
        let mut x = g.add(tokens, pos);
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(&inj) = injections.get(&(i + 1)) {
                if j > 0 {
                    let rest = g.slice_rows(x, j, v);
                    x = g.concat_rows(&[inj, rest]);
                }
            }
            x = block.forward(g, x, self.spec.heads, true, self.activation);
        }
        let last = g.slice_rows(x, v - 1, v);
        let last = self.ln_final.forward(g, last);
        let proj = g.constant(Arc::clone(&self.projection));
        Ok(g.matmul(last, proj))
    }
}

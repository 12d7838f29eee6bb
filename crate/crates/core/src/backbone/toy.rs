use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::text::{TextBackboneSpec, TextEncoder, Tokenizer};
use super::transformer::{LayerNorm, Linear, ResidualBlock};
use super::vision::{VisionBackboneSpec, VisionEncoder};
use super::Backbone;
use crate::autograd::{Activation, Tensor};

/// Vocabulary of the toy text tower. Ids 1 and 2 are the start and end
/// markers.
pub const TOY_VOCAB: &[&str] = &[
    "<pad>", "<sot>", "<eot>", "a", "photo", "of", "an", "the", "object", "with", "without",
    "ghosting", "lens", "flare", "moire", "moiré", "pattern", "clean", "image", "artifact",
    "perceptual", "double", "reflection", "screen", "scene", "picture", "street", "room",
    "face", "building", "sky", "plant",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackboneConfig {
    pub layers: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub input_size: usize,
    pub text_layers: usize,
    pub max_sequence: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            token_dim: 16,
            embed_dim: 8,
            heads: 2,
            patch_size: 8,
            input_size: 32,
            text_layers: 4,
            max_sequence: 32,
            vocab_size: 64,
            seed: 0,
        }
    }
}

/// Tiny deterministic backbone pair with `layers` blocks per tower.
pub fn make_toy_backbone(layers: usize, d: usize, embed: usize, seed: u64) -> Backbone {
    ToyBackboneConfig {
        layers,
        token_dim: d,
        embed_dim: embed,
        text_layers: layers,
        seed,
        ..ToyBackboneConfig::default()
    }
    .build()
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: (usize, usize), std: f64) -> Arc<Tensor> {
        let n = Normal::new(0.0, std).expect("finite std");
        Arc::new(Tensor::from_shape_simple_fn(shape, || n.sample(&mut self.rng)))
    }

    fn linear(&mut self, inp: usize, out: usize) -> Linear {
        Linear {
            weight: self.normal((inp, out), 1.0 / (inp as f64).sqrt()),
            bias: self.normal((1, out), 0.02),
        }
    }

    fn layer_norm(&mut self, width: usize) -> LayerNorm {
        let jitter = self.normal((1, width), 0.05);
        LayerNorm {
            gain: Arc::new(jitter.mapv(|v| 1.0 + v)),
            bias: self.normal((1, width), 0.02),
        }
    }

    fn block(&mut self, d: usize) -> ResidualBlock {
        ResidualBlock {
            ln_1: self.layer_norm(d),
            attn_in: self.linear(d, 3 * d),
            attn_out: self.linear(d, d),
            ln_2: self.layer_norm(d),
            mlp_fc: self.linear(d, 4 * d),
            mlp_proj: self.linear(4 * d, d),
        }
    }
}

impl ToyBackboneConfig {
    pub fn build(&self) -> Backbone {
        assert!(self.heads > 0 && self.token_dim % self.heads == 0, "heads must divide token_dim");
        assert!(self.patch_size > 0 && self.input_size % self.patch_size == 0);
        assert!(self.vocab_size >= 3);
        let d = self.token_dim;
        let e = self.embed_dim;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        };
        let g = self.input_size / self.patch_size;
        let vision_spec = VisionBackboneSpec {
            layer_count: self.layers,
            token_dim: d,
            heads: self.heads,
            patch_size: self.patch_size,
            input_size: self.input_size,
            patch_grid: (g, g),
            class_token: true,
            embed_dim: e,
        };
        let patch_in = 3 * self.patch_size * self.patch_size;
        let vision = VisionEncoder {
            spec: vision_spec,
            activation: Activation::Gelu,
            patch_embed: init.normal((patch_in, d), 1.0 / (patch_in as f64).sqrt()),
            class_embedding: init.normal((1, d), 0.5),
            positional: init.normal((g * g + 1, d), 0.5),
            ln_pre: init.layer_norm(d),
            blocks: (0..self.layers).map(|_| init.block(d)).collect(),
            ln_post: init.layer_norm(d),
            projection: init.normal((d, e), 1.0 / (d as f64).sqrt()),
        };
        let text_spec = TextBackboneSpec {
            layer_count: self.text_layers,
            token_dim: d,
            heads: self.heads,
            max_sequence: self.max_sequence,
            vocab_size: self.vocab_size,
            embed_dim: e,
        };
        let text = TextEncoder {
            spec: text_spec,
            activation: Activation::Gelu,
            token_embedding: init.normal((self.vocab_size, d), 1.0),
            positional: init.normal((self.max_sequence, d), 0.1),
            blocks: (0..self.text_layers).map(|_| init.block(d)).collect(),
            ln_final: init.layer_norm(d),
            projection: init.normal((d, e), 1.0 / (d as f64).sqrt()),
        };
        let vocab: Vec<String> = TOY_VOCAB.iter().map(|s| s.to_string()).collect();
        let tokenizer = Tokenizer::new(&vocab, self.vocab_size, 1, 2);
        Backbone {
            vision,
            text,
            tokenizer,
            vocab,
        }
    }
}

//! The frozen pretrained dual encoder.
//!
//! Both towers are pre-norm transformers evaluated inside an
//! [`autograd::Graph`](crate::autograd::Graph) with their weights entered as
//! constants, so gradients flow *through* them to adapters, hooks and
//! injected tokens while the weights themselves can never change. Nothing in
//! this module hands out mutable access to a weight.
//!
//! Two sources exist: [`make_toy_backbone`], a tiny randomly initialised
//! transformer pair used throughout the tests, and [`load_pretrained`], which
//! reads a checkpoint directory (see [`checkpoint`]).

pub mod checkpoint;
mod text;
mod toy;
mod transformer;
mod vision;

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

pub use checkpoint::{load_pretrained, save_pretrained};
pub use text::{TextBackboneSpec, TextEncoder, Tokenizer};
pub use toy::{make_toy_backbone, ToyBackboneConfig};
pub use transformer::{LayerNorm, Linear, ResidualBlock};
pub use vision::{VisionBackboneSpec, VisionEncoder, VisionOutput};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::Image;
use crate::error::{Error, Result};

/// A transform applied to one vision layer's output before the next layer
/// consumes it.
pub trait LayerHook {
    fn apply(&self, graph: &mut Graph, layer: usize, features: Var) -> Result<Var>;
}

pub struct IdentityHook;

impl LayerHook for IdentityHook {
    fn apply(&self, _: &mut Graph, _: usize, features: Var) -> Result<Var> {
        Ok(features)
    }
}

/// Layer index (1-based) → hook.
#[derive(Default)]
pub struct Hooks<'h> {
    by_layer: BTreeMap<usize, &'h dyn LayerHook>,
}

impl<'h> Hooks<'h> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, hook: &'h dyn LayerHook) {
        self.by_layer.insert(layer, hook);
    }

    pub fn get(&self, layer: usize) -> Option<&'h dyn LayerHook> {
        self.by_layer.get(&layer).copied()
    }

    pub fn len(&self) -> usize {
        self.by_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_layer.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_layer.keys().copied()
    }

    pub(crate) fn check(&self, layer_count: usize) -> Result<()> {
        match self.by_layer.keys().find(|&&l| l == 0 || l > layer_count) {
            Some(l) => Err(Error::arg(
                "hooks",
                format!("hook index {l} outside 1..={layer_count}"),
            )),
            None => Ok(()),
        }
    }
}

impl<'h> FromIterator<(usize, &'h dyn LayerHook)> for Hooks<'h> {
    fn from_iter<I: IntoIterator<Item = (usize, &'h dyn LayerHook)>>(iter: I) -> Self {
        Self {
            by_layer: iter.into_iter().collect(),
        }
    }
}

/// Detached result of a vision forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLayers {
    /// `F^i` for each layer `i = 1..=layer_count`, class token in row 0.
    pub layers: Vec<Tensor>,
    pub global: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub tokenizer: Tokenizer,
    pub vocab: Vec<String>,
}

impl Backbone {
    pub fn vision_spec(&self) -> &VisionBackboneSpec {
        &self.vision.spec
    }

    pub fn text_spec(&self) -> &TextBackboneSpec {
        &self.text.spec
    }

    pub fn embed_dim(&self) -> usize {
        self.vision.spec.embed_dim
    }

    /// Every frozen tensor under its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, Arc<Tensor>)> {
        checkpoint::export_tensors(self)
    }

    /// SHA-256 over every weight (name, shape and bit pattern), hex encoded.
    pub fn checksum(&self) -> String {
        let mut tensors = self.named_tensors();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let mut h = Sha256::new();
        for (name, t) in tensors {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Vision forward with hooks, detached from any graph.
    pub fn encode_image_layers(&self, image: &Image, hooks: &Hooks<'_>) -> Result<ImageLayers> {
        let mut g = Graph::new();
        let out = self.vision.forward(&mut g, image, hooks)?;
        Ok(ImageLayers {
            layers: out.layers.iter().map(|&v| g.value(v).clone()).collect(),
            global: g.value(out.global).iter().copied().collect(),
        })
    }

    /// Text forward with per-layer prefix injections, detached from any graph.
    pub fn encode_text_with_injections(
        &self,
        token_embeddings: &Tensor,
        injections: &BTreeMap<usize, Tensor>,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let tokens = g.input(token_embeddings.clone());
        let inj = injections
            .iter()
            .map(|(&l, t)| (l, g.input(t.clone())))
            .collect();
        let out = self.text.encode(&mut g, tokens, &inj)?;
        Ok(g.value(out).iter().copied().collect())
    }

    pub fn encode_text(&self, token_embeddings: &Tensor) -> Result<Vec<f64>> {
        self.encode_text_with_injections(token_embeddings, &BTreeMap::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    struct ZeroHook;
    impl LayerHook for ZeroHook {
        fn apply(&self, g: &mut Graph, _: usize, x: Var) -> Result<Var> {
            Ok(g.scale(x, 0.0))
        }
    }

    fn toy() -> Backbone {
        make_toy_backbone(4, 16, 8, 3)
    }

    fn image(b: &Backbone) -> Image {
        let s = b.vision.spec.input_size;
        Image::from_fn(s, s, |y, x, c| ((y * 5 + x * 3 + c * 7) % 13) as f64 / 12.0)
    }

    #[test]
    fn frozen_forward_is_bit_stable() {
        let b = toy();
        let img = image(&b);
        let a = b.encode_image_layers(&img, &Hooks::none()).unwrap();
        let c = b.encode_image_layers(&img, &Hooks::none()).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.layers.len(), 4);
        assert_eq!(a.layers[0].dim(), (b.vision.spec.patch_count() + 1, 16));
        assert_eq!(a.global.len(), 8);
    }

    #[test]
    fn identity_hooks_equal_no_hooks() {
        let b = toy();
        let img = image(&b);
        let id = IdentityHook;
        let hooks: Hooks = (1..=4).map(|l| (l, &id as &dyn LayerHook)).collect();
        assert_eq!(
            b.encode_image_layers(&img, &hooks).unwrap(),
            b.encode_image_layers(&img, &Hooks::none()).unwrap()
        );
    }

    #[test]
    fn zeroing_layer_one_changes_later_layers() {
        let b = toy();
        let img = image(&b);
        let z = ZeroHook;
        let mut hooks = Hooks::none();
        hooks.insert(1, &z);
        let hooked = b.encode_image_layers(&img, &hooks).unwrap();
        let plain = b.encode_image_layers(&img, &Hooks::none()).unwrap();
        for l in 1..4 {
            assert_ne!(hooked.layers[l], plain.layers[l], "layer {}", l + 1);
        }
    }

    #[test]
    fn out_of_range_hook_and_wrong_size_are_errors() {
        let b = toy();
        let img = image(&b);
        let id = IdentityHook;
        let mut hooks = Hooks::none();
        hooks.insert(5, &id);
        assert!(b.encode_image_layers(&img, &hooks).is_err());
        assert!(b.encode_image_layers(&Image::zeros(7, 7), &Hooks::none()).is_err());
    }

    fn prompt(b: &Backbone) -> Tensor {
        let mut ids = vec![b.tokenizer.start_token];
        ids.extend(b.tokenizer.encode("a photo of an object with lens flare"));
        ids.push(b.tokenizer.end_token);
        b.text.embed_tokens(&ids).unwrap()
    }

    #[test]
    fn empty_injection_is_vanilla() {
        let b = toy();
        let t = prompt(&b);
        let vanilla = b.encode_text(&t).unwrap();
        let none = b.encode_text_with_injections(&t, &BTreeMap::new()).unwrap();
        assert_eq!(vanilla, none);
        let zero_rows: BTreeMap<_, _> = (1..=3).map(|l| (l, Tensor::zeros((0, 16)))).collect();
        assert_eq!(b.encode_text_with_injections(&t, &zero_rows).unwrap(), vanilla);
    }

    #[test]
    fn injecting_the_vanilla_prefix_is_a_no_op() {
        // Capture each layer's input prefix from a vanilla pass, then inject it.
        let b = toy();
        let t = prompt(&b);
        let j = 2;
        let mut g = Graph::new();
        let tokens = g.input(t.clone());
        let pos = g.constant(Arc::clone(&b.text.positional));
        let pos = g.slice_rows(pos, 0, t.nrows());
        let mut x = g.add(tokens, pos);
        let mut prefixes = BTreeMap::new();
        for (i, block) in b.text.blocks.iter().enumerate() {
            prefixes.insert(i + 1, g.value(x).slice(ndarray::s![0..j, ..]).to_owned());
            x = block.forward(&mut g, x, b.text.spec.heads, true, b.text.activation);
        }
        let injected = b.encode_text_with_injections(&t, &prefixes).unwrap();
        let vanilla = b.encode_text(&t).unwrap();
        for (a, v) in injected.iter().zip(&vanilla) {
            assert!((a - v).abs() < 1e-12, "{a} vs {v}");
        }
    }

    #[test]
    fn nonzero_injection_changes_output_deterministically() {
        let b = toy();
        let t = prompt(&b);
        let inj: BTreeMap<_, _> = (1..=2)
            .map(|l| (l, Tensor::from_shape_fn((2, 16), |(r, c)| ((r + c + l) as f64).sin())))
            .collect();
        let a = b.encode_text_with_injections(&t, &inj).unwrap();
        assert_ne!(a, b.encode_text(&t).unwrap());
        assert_eq!(a, b.encode_text_with_injections(&t, &inj).unwrap());
    }

    #[test]
    fn injection_errors() {
        let b = toy();
        let t = prompt(&b);
        let v = t.nrows();
        let too_long: BTreeMap<_, _> = [(1, Tensor::zeros((v, 16)))].into();
        assert!(b.encode_text_with_injections(&t, &too_long).is_err());
        let bad_layer: BTreeMap<_, _> = [(9, Tensor::zeros((1, 16)))].into();
        assert!(b.encode_text_with_injections(&t, &bad_layer).is_err());
    }

    #[test]
    fn checksum_is_stable_and_weight_sensitive() {
        let a = toy();
        assert_eq!(a.checksum(), toy().checksum());
        assert_ne!(a.checksum(), make_toy_backbone(4, 16, 8, 4).checksum());
    }
}

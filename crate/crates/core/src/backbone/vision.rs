use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::transformer::{LayerNorm, ResidualBlock};
use super::Hooks;
use crate::autograd::{Activation, Graph, Tensor, Var};
use crate::data::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionBackboneSpec {
    pub layer_count: usize,
    /// Token width `d`.
    pub token_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub input_size: usize,
    /// `(g_h, g_w)`.
    pub patch_grid: (usize, usize),
    pub class_token: bool,
    pub embed_dim: usize,
}

impl VisionBackboneSpec {
    pub fn patch_count(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }
}

/// Output of a vision forward pass inside a graph.
#[derive(Debug, Clone)]
pub struct VisionOutput {
    /// Per-layer outputs (index 0 is layer 1), after that layer's hook.
    /// Row 0 is the class token, rows `1..` the patch tokens in row-major
    /// grid order.
    pub layers: Vec<Var>,
    /// Global image embedding, `1×embed_dim`.
    pub global: Var,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub spec: VisionBackboneSpec,
    pub activation: Activation,
    /// `3·p² × d`, input vector ordered channel, row, column within the patch.
    pub patch_embed: Arc<Tensor>,
    pub class_embedding: Arc<Tensor>,
    pub positional: Arc<Tensor>,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<ResidualBlock>,
    pub ln_post: LayerNorm,
    /// `d × embed_dim`.
    pub projection: Arc<Tensor>,
}

impl VisionEncoder {
    /// Flattens an input-sized image into one row per patch.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let s = self.spec.input_size;
        if image.dims() != (s, s) {
            return Err(Error::shape("vision input", (s, s), image.dims()));
        }
        let p = self.spec.patch_size;
        let (gh, gw) = self.spec.patch_grid;
        Ok(Tensor::from_shape_fn((gh * gw, 3 * p * p), |(n, k)| {
            let (py, px) = (n / gw, n % gw);
            let c = k / (p * p);
            let ky = (k / p) % p;
            let kx = k % p;
            image.0[[py * p + ky, px * p + kx, c]]
        }))
    }

    pub fn forward(&self, g: &mut Graph, image: &Image, hooks: &Hooks<'_>) -> Result<VisionOutput> {
        hooks.check(self.spec.layer_count)?;
        let patches = g.input(self.patchify(image)?);
        let w = g.constant(Arc::clone(&self.patch_embed));
        let tokens = g.matmul(patches, w);
        let x = if self.spec.class_token {
            let cls = g.constant(Arc::clone(&self.class_embedding));
            g.concat_rows(&[cls, tokens])
        } else {
            tokens
        };
        let pos = g.constant(Arc::clone(&self.positional));
        let x = g.add(x, pos);
        let mut x = self.ln_pre.forward(g, x);

        let mut layers = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, self.spec.heads, false, self.activation);
            if let Some(hook) = hooks.get(i + 1) {
                x = hook.apply(g, i + 1, x)?;
            }
            layers.push(x);
        }
        let pooled = g.slice_rows(x, 0, 1);
        let pooled = self.ln_post.forward(g, pooled);
        let proj = g.constant(Arc::clone(&self.projection));
        let global = g.matmul(pooled, proj);
        Ok(VisionOutput { layers, global })
    }

    /// Patch rows of a layer output (drops the class token).
    pub fn patch_tokens(&self, g: &mut Graph, layer_output: Var) -> Var {
        if self.spec.class_token {
            let n = g.shape(layer_output).0;
            g.slice_rows(layer_output, 1, n)
        } else {
            layer_output
        }
    }
}

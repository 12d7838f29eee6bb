use std::sync::Arc;

use crate::autograd::{Activation, Graph, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-vector linear map, `y = x W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.constant(Arc::clone(&self.weight));
        let b = g.constant(Arc::clone(&self.bias));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl LayerNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            gain: Arc::new(Tensor::ones((1, width))),
            bias: Arc::new(Tensor::zeros((1, width))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.constant(Arc::clone(&self.gain));
        let bias = g.constant(Arc::clone(&self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Pre-norm transformer block: `x + attn(ln_1 x)`, then `x + mlp(ln_2 x)`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub ln_1: LayerNorm,
    /// Fused q/k/v projection, `width × 3·width`.
    pub attn_in: Linear,
    pub attn_out: Linear,
    pub ln_2: LayerNorm,
    pub mlp_fc: Linear,
    pub mlp_proj: Linear,
}

impl ResidualBlock {
    pub fn width(&self) -> usize {
        self.attn_out.out_dim()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, heads: usize, causal: bool, act: Activation) -> Var {
        let h = self.ln_1.forward(g, x);
        let a = self.attention(g, h, heads, causal);
        let x = g.add(x, a);
        let h = self.ln_2.forward(g, x);
        let h = self.mlp_fc.forward(g, h);
        let h = g.activate(h, act);
        let h = self.mlp_proj.forward(g, h);
        g.add(x, h)
    }

    fn attention(&self, g: &mut Graph, x: Var, heads: usize, causal: bool) -> Var {
        let width = self.width();
        let head_dim = width / heads;
        let n = g.shape(x).0;
        let qkv = self.attn_in.forward(g, x);
        let mask = causal.then(|| {
            g.input(Tensor::from_shape_fn((n, n), |(i, j)| if j > i { -1e9 } else { 0.0 }))
        });
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let lo = h * head_dim;
            let q = g.slice_cols(qkv, lo, lo + head_dim);
            let k = g.slice_cols(qkv, width + lo, width + lo + head_dim);
            let v = g.slice_cols(qkv, 2 * width + lo, 2 * width + lo + head_dim);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let p = g.softmax_rows(scores);
            outs.push(g.matmul(p, v));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.attn_out.forward(g, merged)
    }
}

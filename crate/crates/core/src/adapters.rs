//! Per-layer vision adapters and the multi-granularity projector bank.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Activation, Graph, Tensor, Var};
use crate::backbone::{Hooks, LayerHook};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

pub const ADAPTER_INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_shape_simple_fn(shape, || n.sample(rng))
}

#[derive(Debug, Clone)]
pub struct Adapter {
    /// Backbone layer (1-based) whose output this adapter fuses.
    pub layer: usize,
    /// `d × d`, applied as `F · W`.
    pub weight: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct AdapterStack {
    pub adapters: Vec<Adapter>,
    pub beta: f64,
    pub activation: Activation,
}

impl AdapterStack {
    /// Adapters for layers `1..=count`, registered in `store`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        count: usize,
        token_dim: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::arg("beta", format!("{beta} outside [0, 1]")));
        }
        let adapters = (1..=count)
            .map(|layer| Adapter {
                layer,
                weight: store.add(
                    format!("adapter.{layer}.weight"),
                    ParamGroup::VisionAdapters,
                    gaussian(rng, (token_dim, token_dim), ADAPTER_INIT_STD),
                ),
                norm_gain: store.add(
                    format!("adapter.{layer}.norm.weight"),
                    ParamGroup::VisionAdapters,
                    Tensor::ones((1, token_dim)),
                ),
                norm_bias: store.add(
                    format!("adapter.{layer}.norm.bias"),
                    ParamGroup::VisionAdapters,
                    Tensor::zeros((1, token_dim)),
                ),
            })
            .collect();
        Ok(Self {
            adapters,
            beta,
            activation: Activation::Gelu,
        })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn for_layer(&self, layer: usize) -> Option<&Adapter> {
        self.adapters.iter().find(|a| a.layer == layer)
    }
}

/// `beta·Norm(Act(F·W)) + (1−beta)·F`, token-wise.
pub fn adapt_layer(
    g: &mut Graph,
    features: Var,
    weight: Var,
    norm_gain: Var,
    norm_bias: Var,
    beta: f64,
    activation: Activation,
) -> Result<Var> {
    let d = g.shape(features).1;
    if g.shape(weight) != (d, d) {
        return Err(Error::shape("adapter weight", (d, d), g.shape(weight)));
    }
    let h = g.matmul(features, weight);
    let h = g.activate(h, activation);
    let h = g.layer_norm(h, norm_gain, norm_bias, NORM_EPS);
    let h = g.scale(h, beta);
    let keep = g.scale(features, 1.0 - beta);
    Ok(g.add(h, keep))
}

/// Hook set that runs the adapters of a stack inside one graph.
pub struct AdapterHooks<'a> {
    pub stack: &'a AdapterStack,
    pub bound: &'a Bound,
}

impl LayerHook for AdapterHooks<'_> {
    fn apply(&self, g: &mut Graph, layer: usize, features: Var) -> Result<Var> {
        match self.stack.for_layer(layer) {
            Some(a) => adapt_layer(
                g,
                features,
                self.bound.var(a.weight),
                self.bound.var(a.norm_gain),
                self.bound.var(a.norm_bias),
                self.stack.beta,
                self.stack.activation,
            ),
            None => Ok(features),
        }
    }
}

/// One hook per adapted layer; layers without an adapter are left out.
pub fn attach_hooks<'a>(adapters: &'a AdapterHooks<'a>) -> Hooks<'a> {
    adapters
        .stack
        .adapters
        .iter()
        .map(|a| (a.layer, adapters as &dyn LayerHook))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ProjectorBank {
    /// Tapped backbone layers, 1-based.
    pub taps: Vec<usize>,
    /// One `d × embed_dim` map per tap.
    pub weights: Vec<ParamId>,
}

impl ProjectorBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        taps: &[usize],
        layer_count: usize,
        token_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::arg("taps", "at least one tap is required"));
        }
        if let Some(t) = taps.iter().find(|&&t| t == 0 || t > layer_count) {
            return Err(Error::arg("taps", format!("tap {t} outside 1..={layer_count}")));
        }
        let mut sorted = taps.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != taps.len() {
            return Err(Error::arg("taps", "duplicate tap"));
        }
        let std = 1.0 / (token_dim as f64).sqrt();
        let weights = taps
            .iter()
            .map(|t| {
                store.add(
                    format!("projector.{t}.weight"),
                    ParamGroup::Projectors,
                    gaussian(rng, (token_dim, embed_dim), std),
                )
            })
            .collect();
        Ok(Self {
            taps: taps.to_vec(),
            weights,
        })
    }
}

/// `Σ_i F̃^i · P_i` over the tapped patch features, before normalisation.
pub fn project_sum(g: &mut Graph, tapped: &[Var], projectors: &[Var]) -> Result<Var> {
    if tapped.len() != projectors.len() || tapped.is_empty() {
        return Err(Error::shape("projector taps", projectors.len(), tapped.len()));
    }
    let n = g.shape(tapped[0]).0;
    let mut acc: Option<Var> = None;
    for (&f, &p) in tapped.iter().zip(projectors) {
        let (rows, d) = g.shape(f);
        if rows != n {
            return Err(Error::shape("tapped token count", n, rows));
        }
        if g.shape(p).0 != d {
            return Err(Error::shape("projector input", d, g.shape(p).0));
        }
        let y = g.matmul(f, p);
        acc = Some(match acc {
            Some(a) => g.add(a, y),
            None => y,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Multi-granularity feature: projected sum, L2-normalised per token.
pub fn aggregate_multigranularity(g: &mut Graph, tapped: &[Var], projectors: &[Var]) -> Result<Var> {
    let sum = project_sum(g, tapped, projectors)?;
    Ok(g.l2_normalize_rows(sum))
}

//! Expandable layer families and the sequential classification model built from them.

mod attention;
mod conv;
mod dense;
pub(crate) mod gru;
mod model;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::growth::LoraAdapter;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use attention::{attention_forward, attention_weights, AttentionBlock};
pub use conv::{conv2d_forward, Conv2dLayer};
pub use dense::{dense_forward, DenseLayer};
pub use gru::{gru_forward, GruLayer, GruOutput};
pub use model::{
    model_forward, InputSpec, Layer, LayerSpec, ModelGraph, ModelNodes, ModelSpec, Repr, NUM_CLASSES,
};

/// Softmax temperature used by an attention block after its heads grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Scale by the head dimension recorded before any expansion.
    Original,
    /// Scale by the current head dimension.
    #[default]
    Expanded,
}

/// Graph-building context that resolves weights through any LoRA adapters.
pub struct BuildCtx<'a> {
    pub graph: &'a mut Graph,
    adapters: &'a [LoraAdapter],
    resolved: HashMap<String, NodeId>,
}

impl<'a> BuildCtx<'a> {
    pub fn new(graph: &'a mut Graph, adapters: &'a [LoraAdapter]) -> Self {
        BuildCtx {
            graph,
            adapters,
            resolved: HashMap::new(),
        }
    }

    /// Node holding the effective value of weight `id` (`W + (α/r)·B·A` when adapted).
    pub fn weight(&mut self, id: &str) -> NodeId {
        if let Some(&n) = self.resolved.get(id) {
            return n;
        }
        let base = self.graph.param(id);
        let node = match self.adapters.iter().find(|a| a.target == id) {
            Some(ad) => {
                let b = self.graph.param(&ad.b_id());
                let a = self.graph.param(&ad.a_id());
                let ba = self.graph.matmul(b, a);
                let scaled = self.graph.scale(ba, ad.scaling());
                self.graph.add(base, scaled)
            }
            None => base,
        };
        self.resolved.insert(id.to_string(), node);
        node
    }

    pub fn param(&mut self, id: &str) -> NodeId {
        self.graph.param(id)
    }
}

/// `x · Wᵀ + b`, optionally followed by ReLU.
pub(crate) fn affine(ctx: &mut BuildCtx, x: NodeId, w: &str, b: &str, relu: bool) -> NodeId {
    let w = ctx.weight(w);
    let b = ctx.param(b);
    let xw = ctx.graph.matmul_t(x, w);
    let y = ctx.graph.add_bias(xw, b);
    if relu {
        ctx.graph.relu(y)
    } else {
        y
    }
}

pub(crate) fn init_normal<R: Rng + ?Sized>(
    store: &mut ParamStore,
    id: String,
    shape: &[usize],
    sigma: f64,
    rng: &mut R,
) {
    store.insert(id, Tensor::randn(shape, sigma, rng), true);
}

pub(crate) fn he_sigma(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub(crate) fn lecun_sigma(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Runs a one-layer graph on a single input and returns its output.
pub(crate) fn run_single(
    params: &ParamStore,
    x: &Tensor,
    build: impl FnOnce(&mut BuildCtx, NodeId) -> crate::Result<NodeId>,
) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let input = g.input(x.shape());
    let out = {
        let mut ctx = BuildCtx::new(&mut g, &[]);
        build(&mut ctx, input)?
    };
    g.set_output(out);
    g.forward(std::slice::from_ref(x), params)
}

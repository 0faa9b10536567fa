use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{affine, he_sigma, init_normal, lecun_sigma, run_single, BuildCtx, ScaleMode};
use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Multi-head self-attention with residual connection and an optional
/// feed-forward sublayer (`ffn_dim == 0` disables it).
///
/// Expansion grows `head_dim` uniformly across heads; `model_dim` is fixed so the
/// residual paths are untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub name: String,
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Head dimension before any expansion; used by [`ScaleMode::Original`].
    pub original_head_dim: usize,
    pub ffn_dim: usize,
    pub scale_mode: ScaleMode,
}

impl AttentionBlock {
    pub fn new(
        name: impl Into<String>,
        model_dim: usize,
        num_heads: usize,
        head_dim: usize,
        ffn_dim: usize,
    ) -> Self {
        AttentionBlock {
            name: name.into(),
            model_dim,
            num_heads,
            head_dim,
            original_head_dim: head_dim,
            ffn_dim,
            scale_mode: ScaleMode::default(),
        }
    }

    /// Projection weight of one head: `kind` is `q`, `k` or `v`. Shape `[head_dim, model_dim]`.
    pub fn proj_id(&self, kind: &str, head: usize) -> ParamId {
        format!("{}.{kind}{head}", self.name)
    }

    /// Output projection `[model_dim, num_heads * head_dim]`.
    pub fn out_id(&self) -> ParamId {
        format!("{}.o", self.name)
    }

    pub fn ffn_ids(&self) -> Vec<ParamId> {
        if self.ffn_dim == 0 {
            return vec![];
        }
        ["ff1.weight", "ff1.bias", "ff2.weight", "ff2.bias"]
            .iter()
            .map(|s| format!("{}.{s}", self.name))
            .collect()
    }

    /// Parameters touched by head expansion: every Q/K/V projection and `W_O`.
    pub fn projection_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for h in 0..self.num_heads {
            for kind in ["q", "k", "v"] {
                ids.push(self.proj_id(kind, h));
            }
        }
        ids.push(self.out_id());
        ids
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.projection_ids();
        ids.extend(self.ffn_ids());
        ids
    }

    pub fn projection_param_count(&self) -> usize {
        4 * self.num_heads * self.head_dim * self.model_dim
    }

    pub fn scale_dim(&self) -> usize {
        match self.scale_mode {
            ScaleMode::Original => self.original_head_dim,
            ScaleMode::Expanded => self.head_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.model_dim;
        for h in 0..self.num_heads {
            for kind in ["q", "k", "v"] {
                init_normal(store, self.proj_id(kind, h), &[self.head_dim, d], lecun_sigma(d), rng);
            }
        }
        let cat = self.num_heads * self.head_dim;
        init_normal(store, self.out_id(), &[d, cat], lecun_sigma(cat), rng);
        if self.ffn_dim > 0 {
            let f = self.ffn_dim;
            init_normal(store, format!("{}.ff1.weight", self.name), &[f, d], he_sigma(d), rng);
            store.insert(format!("{}.ff1.bias", self.name), Tensor::zeros(&[f]), true);
            init_normal(store, format!("{}.ff2.weight", self.name), &[d, f], lecun_sigma(f), rng);
            store.insert(format!("{}.ff2.bias", self.name), Tensor::zeros(&[d]), true);
        }
    }

    /// Builds the block on `x: [B, T, model_dim]`. Returns the output node and the
    /// attention-weight node of every head.
    pub fn build_with_weights(&self, ctx: &mut BuildCtx, x: NodeId) -> (NodeId, Vec<NodeId>) {
        let inv_sqrt = 1.0 / (self.scale_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut attn = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let wq = ctx.weight(&self.proj_id("q", h));
            let wk = ctx.weight(&self.proj_id("k", h));
            let wv = ctx.weight(&self.proj_id("v", h));
            let q = ctx.graph.matmul_t(x, wq);
            let k = ctx.graph.matmul_t(x, wk);
            let v = ctx.graph.matmul_t(x, wv);
            let scores = ctx.graph.batch_matmul(q, k, true);
            let scores = ctx.graph.scale(scores, inv_sqrt);
            let a = ctx.graph.softmax(scores);
            attn.push(a);
            heads.push(ctx.graph.batch_matmul(a, v, false));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            ctx.graph.concat(heads)
        };
        let wo = ctx.weight(&self.out_id());
        let proj = ctx.graph.matmul_t(cat, wo);
        let mut y = ctx.graph.add(x, proj);
        if self.ffn_dim > 0 {
            let f = affine(
                ctx,
                y,
                &format!("{}.ff1.weight", self.name),
                &format!("{}.ff1.bias", self.name),
                true,
            );
            let f = affine(
                ctx,
                f,
                &format!("{}.ff2.weight", self.name),
                &format!("{}.ff2.bias", self.name),
                false,
            );
            y = ctx.graph.add(y, f);
        }
        ctx.graph.label(y, self.name.clone());
        (y, attn)
    }

    pub fn build(&self, ctx: &mut BuildCtx, x: NodeId) -> NodeId {
        self.build_with_weights(ctx, x).0
    }
}

/// Runs the block on `sequence: [T, model_dim]` or `[B, T, model_dim]`.
pub fn attention_forward(block: &AttentionBlock, params: &ParamStore, sequence: &Tensor) -> Result<Tensor> {
    let seq = match sequence.ndim() {
        2 => sequence.reshape(vec![1, sequence.shape()[0], sequence.shape()[1]])?,
        3 => sequence.clone(),
        _ => return Err(Error::invalid(format!("attention expects [T, D] or [B, T, D], got {:?}", sequence.shape()))),
    };
    if seq.shape()[2] != block.model_dim {
        return Err(Error::invalid(format!(
            "attention `{}` expects model dim {}, got {}",
            block.name,
            block.model_dim,
            seq.shape()[2]
        )));
    }
    let y = run_single(params, &seq, |ctx, input| Ok(block.build(ctx, input)))?;
    if sequence.ndim() == 2 {
        y.reshape(sequence.shape().to_vec())
    } else {
        Ok(y)
    }
}

/// Attention weights of every head for inspection, each `[B, T, T]`.
pub fn attention_weights(
    block: &AttentionBlock,
    params: &ParamStore,
    seq: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut g = crate::autodiff::Graph::new();
    let input = g.input(seq.shape());
    let (out, attn) = {
        let mut ctx = BuildCtx::new(&mut g, &[]);
        block.build_with_weights(&mut ctx, input)
    };
    g.set_output(out);
    g.forward(std::slice::from_ref(seq), params)?;
    Ok(attn.iter().map(|&a| g.value(a).unwrap().clone()).collect())
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_normal, lecun_sigma, BuildCtx};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// The three GRU gates: update `z`, reset `r`, candidate `h`.
pub const GATES: [&str; 3] = ["z", "r", "h"];

/// Gated recurrent unit over `[B, T, input_dim]` sequences, returning the final
/// hidden state `[B, hidden_dim]`.
///
/// Per gate `g`: input weight `w_g: [hidden, input]`, recurrent weight
/// `u_g: [hidden, hidden]`, bias `b_g: [hidden]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruOutput {
    /// `[B, hidden_dim]`
    pub final_state: Tensor,
    /// Hidden state after every step, each `[B, hidden_dim]`.
    pub states: Vec<Tensor>,
}

impl GruLayer {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        GruLayer {
            name: name.into(),
            input_dim,
            hidden_dim,
        }
    }

    pub fn w_id(&self, gate: &str) -> ParamId {
        format!("{}.w_{gate}", self.name)
    }

    pub fn u_id(&self, gate: &str) -> ParamId {
        format!("{}.u_{gate}", self.name)
    }

    pub fn b_id(&self, gate: &str) -> ParamId {
        format!("{}.b_{gate}", self.name)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        GATES
            .iter()
            .flat_map(|g| [self.w_id(g), self.u_id(g), self.b_id(g)])
            .collect()
    }

    pub fn gate_param_count(&self) -> usize {
        let h = self.hidden_dim;
        h * self.input_dim + h * h + h
    }

    pub fn param_count(&self) -> usize {
        3 * self.gate_param_count()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.hidden_dim;
        for g in GATES {
            init_normal(store, self.w_id(g), &[h, self.input_dim], lecun_sigma(self.input_dim), rng);
            init_normal(store, self.u_id(g), &[h, h], lecun_sigma(h), rng);
            store.insert(self.b_id(g), Tensor::zeros(&[h]), true);
        }
    }

    /// Unrolls the recurrence over `steps` time steps. Returns the node of every
    /// hidden state; the last one is the layer output.
    pub fn build(&self, ctx: &mut BuildCtx, x: NodeId, batch: usize, steps: usize) -> Vec<NodeId> {
        let mut h = ctx
            .graph
            .constant(Tensor::zeros(&[batch, self.hidden_dim]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = ctx.graph.select_time(x, t);
            let z = self.gate(ctx, "z", xt, h);
            let z = ctx.graph.sigmoid(z);
            let r = self.gate(ctx, "r", xt, h);
            let r = ctx.graph.sigmoid(r);
            let rh = ctx.graph.mul(r, h);
            let cand = self.gate(ctx, "h", xt, rh);
            let cand = ctx.graph.tanh(cand);
            // h_t = (1 - z) ⊙ h_{t-1} + z ⊙ h̃_t
            let one_minus_z = {
                let neg = ctx.graph.scale(z, -1.0);
                ctx.graph.add_scalar(neg, 1.0)
            };
            let keep = ctx.graph.mul(one_minus_z, h);
            let write = ctx.graph.mul(z, cand);
            h = ctx.graph.add(keep, write);
            ctx.graph.label(h, format!("{}[t={t}]", self.name));
            states.push(h);
        }
        states
    }

    fn gate(&self, ctx: &mut BuildCtx, gate: &str, x: NodeId, h: NodeId) -> NodeId {
        let w = ctx.weight(&self.w_id(gate));
        let u = ctx.weight(&self.u_id(gate));
        let b = ctx.param(&self.b_id(gate));
        let xw = ctx.graph.matmul_t(x, w);
        let hu = ctx.graph.matmul_t(h, u);
        let s = ctx.graph.add(xw, hu);
        ctx.graph.add_bias(s, b)
    }
}

/// Runs the GRU over `sequence: [T, input_dim]` or `[B, T, input_dim]`.
///
/// A zero-length sequence cannot be represented as a [`Tensor`], so the empty
/// case is rejected at tensor construction.
pub fn gru_forward(layer: &GruLayer, params: &ParamStore, sequence: &Tensor) -> Result<GruOutput> {
    let seq = match sequence.ndim() {
        2 => sequence.reshape(vec![1, sequence.shape()[0], sequence.shape()[1]])?,
        3 => sequence.clone(),
        _ => {
            return Err(Error::invalid(format!(
                "gru `{}` expects [T, D] or [B, T, D], got {:?}",
                layer.name,
                sequence.shape()
            )))
        }
    };
    let (batch, steps, d) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    if d != layer.input_dim {
        return Err(Error::invalid(format!(
            "gru `{}` expects feature dim {}, got {d}",
            layer.name, layer.input_dim
        )));
    }
    let mut g = Graph::new();
    let input = g.input(seq.shape());
    let states = {
        let mut ctx = BuildCtx::new(&mut g, &[]);
        layer.build(&mut ctx, input, batch, steps)
    };
    let last = *states.last().expect("steps >= 1");
    g.set_output(last);
    let final_state = g.forward(std::slice::from_ref(&seq), params)?;
    let states = states
        .iter()
        .map(|&n| g.value(n).expect("evaluated").clone())
        .collect();
    Ok(GruOutput {
        final_state,
        states,
    })
}

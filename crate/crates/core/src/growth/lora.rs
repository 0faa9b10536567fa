use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Low-rank adapter on a 2-D weight: effective weight `W + (α/r)·B·A`,
/// `B: [m, r]`, `A: [r, n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub rows: usize,
    pub cols: usize,
}

impl LoraAdapter {
    pub fn a_id(&self) -> ParamId {
        format!("{}.lora_a", self.target)
    }

    pub fn b_id(&self) -> ParamId {
        format!("{}.lora_b", self.target)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn trainable_count(&self) -> usize {
        self.rank * (self.rows + self.cols)
    }
}

/// Freezes all base parameters and attaches a rank-`rank` adapter to each target.
/// `A ~ N(0, 1/n)`, `B = 0`, so the initial effective weights equal the base weights.
/// Only adapter factors are trainable afterwards.
pub fn lora_wrap(
    params: &mut ParamStore,
    targets: &[ParamId],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<LoraAdapter>> {
    if rank == 0 {
        return Err(Error::invalid("LoRA rank must be at least 1"));
    }
    let mut adapters = Vec::with_capacity(targets.len());
    for id in targets {
        let w = params.get(id)?;
        if w.ndim() != 2 {
            return Err(Error::invalid(format!("LoRA target `{id}` is not 2-D ({:?})", w.shape())));
        }
        let (m, n) = (w.shape()[0], w.shape()[1]);
        if rank > m.min(n) {
            return Err(Error::invalid(format!(
                "LoRA rank {rank} exceeds min({m}, {n}) for `{id}`"
            )));
        }
        adapters.push(LoraAdapter {
            target: id.clone(),
            rank,
            alpha,
            rows: m,
            cols: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.freeze_all();
    for ad in &adapters {
        let a = Tensor::randn(&[rank, ad.cols], (1.0 / ad.cols as f64).sqrt(), &mut rng);
        params.insert(ad.a_id(), a, true);
        params.insert(ad.b_id(), Tensor::zeros(&[ad.rows, rank]), true);
    }
    Ok(adapters)
}

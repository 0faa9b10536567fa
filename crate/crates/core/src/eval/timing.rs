use std::time::Instant;

use crate::error::{Error, Result};
use crate::layers::ModelGraph;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Result of a backward-time measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardTiming {
    /// Mean wall-clock milliseconds of one backward pass plus masked update.
    pub ms_per_step: f64,
    /// Parameter elements updated by one optimizer step.
    pub updated_elements: usize,
}

/// Times backward + masked optimizer update on a fixed batch. The forward pass
/// runs before every step but is excluded from the clock. `params` is left
/// untouched; steps are applied to a private copy.
pub fn measure_backward_time(
    model: &ModelGraph,
    params: &ParamStore,
    inputs: &Tensor,
    targets: &Tensor,
    optimizer: &OptimizerConfig,
    warmup: usize,
    iters: usize,
) -> Result<BackwardTiming> {
    if iters == 0 {
        return Err(Error::invalid("iters must be at least 1"));
    }
    let batch = inputs.shape()[0];
    let (mut graph, _) = model.build_loss_graph(batch);
    let mut work = params.clone();
    let mut opt = Optimizer::new(optimizer.clone());
    let io = [inputs.clone(), targets.clone()];
    let mut total = 0.0;
    let mut updated = 0;
    for k in 0..warmup + iters {
        graph.forward(&io, &work)?;
        let start = Instant::now();
        let grads = graph.backward(&work)?;
        updated = opt.step(&mut work, &grads)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if k >= warmup {
            total += elapsed;
        }
    }
    Ok(BackwardTiming {
        ms_per_step: (total / iters as f64).max(f64::MIN_POSITIVE),
        updated_elements: updated,
    })
}

//! Mini-batch training with per-epoch dev evaluation and best-dev selection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{batch_tensors, Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, CurvePoint, ScoreSet};
use crate::layers::ModelGraph;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamStore;

const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Seeds the per-epoch shuffling of the training split.
    pub shuffle_seed: u64,
    /// Label written into every curve point.
    pub stage: String,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub curve: Vec<CurvePoint>,
    /// 1-based epoch with the lowest dev EER (earliest on ties); `None` when no
    /// epoch ran.
    pub best_epoch: Option<usize>,
    pub best_dev_eer: Option<f64>,
    /// Parameters at the best epoch, or the starting parameters if no epoch ran.
    pub best_params: ParamStore,
    pub steps: usize,
}

/// Trains `params` in place for `opts.epochs` epochs. Only elements allowed by
/// each parameter's train mask are updated. After every epoch the dev split is
/// scored and the best parameters so far are retained.
pub fn train_stage(
    model: &ModelGraph,
    params: &mut ParamStore,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<StageResult> {
    opts.optimizer.validate()?;
    let mut opt = Optimizer::new(opts.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut graphs: HashMap<usize, Graph> = HashMap::new();
    let mut result = StageResult {
        curve: Vec::with_capacity(opts.epochs),
        best_epoch: None,
        best_dev_eer: None,
        best_params: params.clone(),
        steps: 0,
    };
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch, idx) in order.chunks(opts.optimizer.batch_size).enumerate() {
            let graph = graphs
                .entry(idx.len())
                .or_insert_with(|| model.build_loss_graph(idx.len()).0);
            let (x, y) = batch_tensors(&data.train, idx, model.input);
            let nan = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
                other => other,
            };
            let loss = graph.forward(&[x, y], params).map_err(nan)?.values()[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let grads = graph.backward(params)?;
            opt.step(params, &grads)?;
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            result.steps += 1;
        }
        let dev_eer = evaluate_eer(model, params, &data.dev)?;
        result.curve.push(CurvePoint {
            stage: opts.stage.clone(),
            epoch,
            train_loss: loss_sum / seen as f64,
            dev_eer,
        });
        if result.best_dev_eer.is_none_or(|b| dev_eer < b) {
            result.best_dev_eer = Some(dev_eer);
            result.best_epoch = Some(epoch);
            result.best_params = params.clone();
        }
    }
    Ok(result)
}

/// Spoof scores `logit[spoof] − logit[bona fide]`, one per example.
pub fn score_examples(
    model: &ModelGraph,
    params: &ParamStore,
    examples: &[LabeledExample],
) -> Result<Vec<f64>> {
    let mut graphs: HashMap<usize, Graph> = HashMap::new();
    let mut scores = Vec::with_capacity(examples.len());
    let all: Vec<usize> = (0..examples.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let graph = graphs
            .entry(idx.len())
            .or_insert_with(|| model.build_logits_graph(idx.len()).0);
        let (x, _) = batch_tensors(examples, idx, model.input);
        let logits = graph.forward(&[x], params)?;
        scores.extend(logits.values().chunks_exact(2).map(|l| l[1] - l[0]));
    }
    Ok(scores)
}

/// EER of the model's scores on `examples`, in [0, 1].
pub fn evaluate_eer(model: &ModelGraph, params: &ParamStore, examples: &[LabeledExample]) -> Result<f64> {
    let scores = score_examples(model, params, examples)?;
    let set = ScoreSet::new(scores, examples.iter().map(|e| e.label).collect())?;
    Ok(compute_eer(&set))
}

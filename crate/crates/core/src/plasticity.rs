//! Grow-train-prune pipeline: train, expand and train with every parameter
//! trainable, then prune the added neurons and train again, with the same
//! number of epochs in each stage.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{CurvePoint, RunReport, Strategy};
use crate::growth::{apply_freeze, dropin, prune, DropinPlan, FreezePolicy, GrowthRecord, NeuronLedger};
use crate::layers::ModelGraph;
use crate::optim::OptimizerConfig;
use crate::params::ParamStore;
use crate::train::{evaluate_eer, train_stage, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct PlasticityConfig {
    pub epochs_per_stage: usize,
    /// Growth applied before stage 2; its freeze policy is ignored.
    pub plan: DropinPlan,
    pub optimizer: OptimizerConfig,
    pub shuffle_seed: u64,
    /// Where `stage{1,2,3}-{last,best}` checkpoints and `stages.jsonl` go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Dataset label used in the report.
    pub dataset_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Initial,
    Expanded,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageKind,
    pub epochs: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub dev_eer: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
}

impl StageRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &StageRecord) -> bool {
        StageRecord {
            wall_seconds: 0.0,
            ..self.clone()
        } == StageRecord {
            wall_seconds: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlasticityOutcome {
    /// Last-epoch parameters of stage 3 (original architecture).
    pub final_params: ParamStore,
    /// Best-dev parameters of stage 3, used for the report.
    pub best_params: ParamStore,
    pub records: Vec<StageRecord>,
    pub growth: Vec<GrowthRecord>,
    pub report: RunReport,
}

fn stage_label(n: usize) -> String {
    format!("stage{n}")
}

fn log_stage(dir: &Path, record: &StageRecord) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("stages.jsonl");
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| f.write_all(&line))
        .map_err(|e| Error::io(&path, e))
}

/// Runs the three stages on `model`/`params` (modified in place; on return the
/// model has its original architecture again).
pub fn run_plasticity(
    model: &mut ModelGraph,
    params: &mut ParamStore,
    data: &Dataset,
    config: &PlasticityConfig,
) -> Result<PlasticityOutcome> {
    let mut ledger = NeuronLedger::new(model);
    let mut records = Vec::with_capacity(3);
    let mut curves: Vec<CurvePoint> = Vec::new();
    let mut growth = Vec::new();
    let mut best_params = params.clone();

    for (n, kind) in [(1, StageKind::Initial), (2, StageKind::Expanded), (3, StageKind::Pruned)] {
        let start = Instant::now();
        let params_before = params.param_count(false);
        match kind {
            StageKind::Initial => params.unfreeze_all(),
            StageKind::Expanded => {
                let plan = DropinPlan {
                    freeze_policy: FreezePolicy::Unfrozen,
                    ..config.plan.clone()
                };
                growth = dropin(model, params, &mut ledger, &plan)?;
                apply_freeze(params, &ledger, FreezePolicy::Unfrozen)?;
            }
            StageKind::Pruned => {
                prune(model, params, &mut ledger)?;
                params.unfreeze_all();
            }
        }
        let opts = TrainOptions {
            epochs: config.epochs_per_stage,
            optimizer: config.optimizer.clone(),
            shuffle_seed: config.shuffle_seed.wrapping_add(n as u64),
            stage: stage_label(n),
        };
        let res = train_stage(model, params, data, &opts)?;
        if let Some(dir) = &config.checkpoint_dir {
            save_checkpoint(dir, &format!("stage{n}-last"), model, params, &ledger)?;
            save_checkpoint(dir, &format!("stage{n}-best"), model, &res.best_params, &ledger)?;
        }
        let record = StageRecord {
            stage: kind,
            epochs: res.curve.len(),
            params_before,
            params_after: params.param_count(false),
            dev_eer: res.curve.iter().map(|c| c.dev_eer).collect(),
            best_epoch: res.best_epoch,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &config.checkpoint_dir {
            log_stage(dir, &record)?;
        }
        records.push(record);
        curves.extend(res.curve);
        if kind == StageKind::Pruned {
            best_params = res.best_params;
        }
    }

    let test_eer = evaluate_eer(model, &best_params, &data.test)?;
    let report = RunReport {
        dataset: config.dataset_name.clone(),
        model: model.name.clone(),
        strategy: Strategy::Plasticity,
        test_eer_percent: 100.0 * test_eer,
        backward_ms_per_step: None,
        params_total: best_params.param_count(false),
        params_trainable: None,
        total_epochs: 3 * config.epochs_per_stage,
        curves,
    };
    Ok(PlasticityOutcome {
        final_params: params.clone(),
        best_params,
        records,
        growth,
        report,
    })
}

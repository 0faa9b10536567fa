use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::checkpoint::{save_checkpoint, write_atomic};
use crate::data::{batch_tensors, generate, Dataset};
use crate::error::{Error, Result};
use crate::eval::{emit_report, measure_backward_time, CurvePoint, RunReport, Strategy};
use crate::growth::{
    apply_freeze_with, dropin, lora_wrap, select_layers, DropinPlan, FreezePolicy, GrowthRecord, NeuronLedger,
};
use crate::layers::{Layer, ModelGraph};
use crate::params::{ParamId, ParamStore};
use crate::plasticity::{run_plasticity, PlasticityConfig, StageRecord};
use crate::train::{evaluate_eer, train_stage, TrainOptions};

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    /// Final architecture (expanded for dropin runs, with adapters for LoRA).
    pub model: ModelGraph,
    /// Best-dev parameters of the final training phase, with the trainability
    /// used in that phase.
    pub params: ParamStore,
    pub ledger: NeuronLedger,
    pub growth: Vec<GrowthRecord>,
    /// Plasticity stage records (empty for other strategies).
    pub stages: Vec<StageRecord>,
}

/// Name of the checkpoint that holds a run's reported parameters.
pub const FINAL_CHECKPOINT: &str = "final-best";
/// Report CSV written into a run's output directory.
pub const REPORT_FILE: &str = "report.csv";

/// Resolves the dropin plan of `config` against `model`.
pub fn dropin_plan(config: &ExperimentConfig, model: &ModelGraph, policy: FreezePolicy) -> Result<DropinPlan> {
    let d = &config.dropin;
    let selected: BTreeSet<usize> = if d.layers.is_empty() {
        select_layers(model, d.layer_count, config.seed)?
    } else {
        d.layers.iter().copied().collect()
    };
    Ok(DropinPlan {
        selected_layers: selected,
        growth_ratio: d.growth_ratio,
        init_sigma: d.init_sigma,
        freeze_policy: policy,
        attention_scale: d.attention_scale,
        rng_seed: config.seed,
    })
}

/// Default LoRA targets: dense and attention weight matrices, and the head,
/// whose smaller side is at least `rank`.
pub fn default_lora_targets(model: &ModelGraph, params: &ParamStore, rank: usize) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for layer in &model.layers {
        match layer {
            Layer::Dense(l) => ids.push(l.weight_id()),
            Layer::Attention(a) => {
                ids.extend(a.projection_ids());
                ids.extend(a.ffn_ids().into_iter().filter(|id| id.ends_with("weight")));
            }
            Layer::Conv2d(_) | Layer::Gru(_) => {}
        }
    }
    ids.push(model.head.weight_id());
    ids.into_iter()
        .filter(|id| {
            params
                .get(id)
                .map(|t| t.ndim() == 2 && t.shape()[0].min(t.shape()[1]) >= rank)
                .unwrap_or(false)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_phase(
    config: &ExperimentConfig,
    model: &ModelGraph,
    params: &mut ParamStore,
    data: &Dataset,
    epochs: usize,
    stage: &str,
    seed_offset: u64,
    curves: &mut Vec<CurvePoint>,
) -> Result<ParamStore> {
    let res = train_stage(
        model,
        params,
        data,
        &TrainOptions {
            epochs,
            optimizer: config.optimizer.clone(),
            shuffle_seed: config.seed.wrapping_add(seed_offset),
            stage: stage.into(),
        },
    )?;
    curves.extend(res.curve);
    Ok(res.best_params)
}

/// Runs the configured strategy end to end. When `output_dir` is set, the
/// canonical config, the reported checkpoint and the report row are written there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let data = generate(&config.data)?;
    let mut model = ModelGraph::from_spec(&config.model, config.data.freq_bins, config.data.time_frames)?;
    let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let out_dir = config.output_dir.as_deref();
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("config.toml"), config.to_canonical()?.as_bytes())?;
    }
    let mut ledger = NeuronLedger::new(&model);
    let mut curves = Vec::new();
    let mut growth = Vec::new();
    let mut stages = Vec::new();

    let best = match config.strategy {
        Strategy::Baseline => train_phase(config, &model, &mut params, &data, config.epochs, "train", 1, &mut curves)?,
        Strategy::Plasticity => {
            let plan = dropin_plan(config, &model, FreezePolicy::Unfrozen)?;
            let out = run_plasticity(
                &mut model,
                &mut params,
                &data,
                &PlasticityConfig {
                    epochs_per_stage: config.plasticity.epochs_per_stage,
                    plan,
                    optimizer: config.optimizer.clone(),
                    shuffle_seed: config.seed,
                    checkpoint_dir: out_dir.map(|d| d.join("checkpoints")),
                    dataset_name: config.dataset_name.clone(),
                },
            )?;
            curves = out.report.curves;
            growth = out.growth;
            stages = out.records;
            out.best_params
        }
        Strategy::DropinFrozen | Strategy::DropinUnfrozen | Strategy::Lora => {
            if config.pretrain_epochs > 0 {
                train_phase(config, &model, &mut params, &data, config.pretrain_epochs, "pretrain", 1, &mut curves)?;
            }
            if config.strategy == Strategy::Lora {
                let targets = if config.lora.targets.is_empty() {
                    default_lora_targets(&model, &params, config.lora.rank)
                } else {
                    config.lora.targets.clone()
                };
                if targets.is_empty() {
                    return Err(Error::Config {
                        key: "lora.targets".into(),
                        msg: format!("no weight admits rank {}", config.lora.rank),
                    });
                }
                model.adapters = lora_wrap(&mut params, &targets, config.lora.rank, config.lora.alpha, config.seed)?;
            } else {
                let policy = if config.strategy == Strategy::DropinFrozen {
                    FreezePolicy::Frozen
                } else {
                    FreezePolicy::Unfrozen
                };
                let plan = dropin_plan(config, &model, policy)?;
                growth = dropin(&mut model, &mut params, &mut ledger, &plan)?;
                let head = if config.dropin.train_head {
                    model.head.param_ids()
                } else {
                    Vec::new()
                };
                apply_freeze_with(&mut params, &ledger, policy, &head)?;
            }
            train_phase(config, &model, &mut params, &data, config.epochs, "train", 2, &mut curves)?
        }
    };

    let test_eer = evaluate_eer(&model, &best, &data.test)?;
    let (backward_ms, trainable) = if config.strategy == Strategy::Plasticity {
        (None, None)
    } else {
        let n = config.optimizer.batch_size.min(data.train.len());
        let idx: Vec<usize> = (0..n).collect();
        let (x, y) = batch_tensors(&data.train, &idx, model.input);
        let t = measure_backward_time(
            &model,
            &best,
            &x,
            &y,
            &config.optimizer,
            config.timing.warmup,
            config.timing.iters,
        )?;
        (Some(t.ms_per_step), Some(best.param_count(true)))
    };
    let report = RunReport {
        dataset: config.dataset_name.clone(),
        model: model.name.clone(),
        strategy: config.strategy,
        test_eer_percent: 100.0 * test_eer,
        backward_ms_per_step: backward_ms,
        params_total: best.param_count(false),
        params_trainable: trainable,
        total_epochs: config.total_epochs(),
        curves,
    };
    if let Some(dir) = out_dir {
        save_checkpoint(dir, FINAL_CHECKPOINT, &model, &best, &ledger)?;
        emit_report(&report, &dir.join(REPORT_FILE))?;
    }
    Ok(RunOutcome {
        report,
        model,
        params: best,
        ledger,
        growth,
        stages,
    })
}

/// Report CSV path inside a run directory.
pub fn report_path(dir: &Path) -> std::path::PathBuf {
    dir.join(REPORT_FILE)
}

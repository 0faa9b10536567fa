mod common;

use common::*;
use dropin_core::autodiff::{backward, forward};
use dropin_core::checkpoint::load_checkpoint;
use dropin_core::data::{batch_tensors, generate, Dataset, Label, LabeledExample, SynthSpec};
use dropin_core::eval::{
    compute_eer, emit_report, feature_maps_and_grads, gradcam, read_reports, RunReport, ScoreSet, Strategy,
};
use dropin_core::growth::{prune, DropinPlan};
use dropin_core::harness::{run_experiment, ExperimentConfig};
use dropin_core::layers::{model_forward, InputSpec, ModelGraph};
use dropin_core::optim::{OptimizerConfig, OptimizerKind};
use dropin_core::plasticity::{run_plasticity, PlasticityConfig};
use dropin_core::train::{train_stage, TrainOptions};
use dropin_core::{param_count, Error, Tensor};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_train: 48,
        n_dev: 24,
        n_test: 24,
        freq_bins: 8,
        time_frames: 6,
        seed,
        ..SynthSpec::default()
    }
}

fn small_model() -> ModelGraph {
    ModelGraph::from_spec(&spec("tiny", InputSpec::Image, vec![conv(2, 1), dense(4)]), 8, 6).unwrap()
}

fn sgd(lr: f64, batch: usize) -> OptimizerConfig {
    OptimizerConfig {
        kind: OptimizerKind::Sgd,
        learning_rate: lr,
        batch_size: batch,
    }
}

fn opts(epochs: usize, optimizer: OptimizerConfig) -> TrainOptions {
    TrainOptions {
        epochs,
        optimizer,
        shuffle_seed: 9,
        stage: "train".into(),
    }
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let data = generate(&small_spec(1)).unwrap();
    let model = small_model();
    let mut p = init(&model, 1);
    let start = p.clone();
    let res = train_stage(&model, &mut p, &data, &opts(0, OptimizerConfig::default())).unwrap();
    assert!(res.curve.is_empty());
    assert_eq!(res.steps, 0);
    assert!(res.best_epoch.is_none());
    assert!(p.bit_eq(&start));
    assert!(res.best_params.bit_eq(&start));
}

#[test]
fn fully_frozen_store_does_not_move() {
    let data = generate(&small_spec(2)).unwrap();
    let model = small_model();
    let mut p = init(&model, 2);
    p.freeze_all();
    let start = p.clone();
    let res = train_stage(&model, &mut p, &data, &opts(2, OptimizerConfig::default())).unwrap();
    assert_eq!(res.curve.len(), 2);
    assert!(p.bit_eq(&start));
}

#[test]
fn one_full_batch_sgd_epoch_is_one_gradient_step() {
    let data = generate(&small_spec(3)).unwrap();
    let model = small_model();
    let mut p = init(&model, 3);
    let start = p.clone();
    let n = data.train.len();
    let idx: Vec<usize> = (0..n).collect();
    let (x, y) = batch_tensors(&data.train, &idx, model.input);
    let (mut g, _) = model.build_loss_graph(n);
    forward(&mut g, &[x, y], &start).unwrap();
    let grads = backward(&mut g, &start).unwrap();

    let lr = 0.05;
    train_stage(&model, &mut p, &data, &opts(1, sgd(lr, n))).unwrap();
    for (id, t0) in start.iter() {
        let gr = &grads[id];
        for ((a, b), d) in p.get(id).unwrap().values().iter().zip(t0.values()).zip(gr.values()) {
            assert!((a - (b - lr * d)).abs() < 1e-12, "{id}");
        }
    }
}

#[test]
fn best_epoch_tracks_the_lowest_dev_eer() {
    let data = generate(&small_spec(4)).unwrap();
    let model = small_model();
    let mut p = init(&model, 4);
    let res = train_stage(&model, &mut p, &data, &opts(4, sgd(0.05, 8))).unwrap();
    let eers: Vec<f64> = res.curve.iter().map(|c| c.dev_eer).collect();
    let min = eers.iter().copied().fold(f64::INFINITY, f64::min);
    let first = eers.iter().position(|&e| e == min).unwrap() + 1;
    assert_eq!(res.best_epoch, Some(first));
    assert_eq!(res.best_dev_eer, Some(min));
    assert_eq!(res.steps, 4 * 6);
}

#[test]
fn divergence_is_reported_with_epoch_and_batch() {
    let data = generate(&small_spec(5)).unwrap();
    let model = small_model();
    let mut p = init(&model, 5);
    let w = p.get_mut("l0.weight").unwrap();
    w.values_mut()[0] = f64::NAN;
    match train_stage(&model, &mut p, &data, &opts(1, sgd(0.1, 8))) {
        Err(Error::NonFiniteLoss { epoch, batch }) => assert_eq!((epoch, batch), (1, 0)),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

fn plasticity_config(epochs: usize, sigma: Option<f64>, dir: Option<std::path::PathBuf>) -> PlasticityConfig {
    let mut plan = DropinPlan::new([0, 1]);
    plan.init_sigma = sigma;
    PlasticityConfig {
        epochs_per_stage: epochs,
        plan,
        optimizer: sgd(0.05, 8),
        shuffle_seed: 11,
        checkpoint_dir: dir,
        dataset_name: "synth".into(),
    }
}

#[test]
fn plasticity_without_training_is_the_identity() {
    let data = generate(&small_spec(6)).unwrap();
    let model = small_model();
    let p = init(&model, 6);
    let mut m = model.clone();
    let mut q = p.clone();
    let out = run_plasticity(&mut m, &mut q, &data, &plasticity_config(0, Some(0.0), None)).unwrap();
    assert_eq!(m, model);
    assert!(q.bit_eq(&p));
    assert!(out.final_params.bit_eq(&p));
    assert_eq!(out.records.len(), 3);
    assert!(out.records[1].params_after > out.records[1].params_before);
    assert_eq!(out.records[2].params_after, param_count(&p, false));
}

#[test]
fn plasticity_restores_the_parameter_count_and_is_deterministic() {
    let data = generate(&small_spec(7)).unwrap();
    let model = small_model();
    let p = init(&model, 7);
    let run = || {
        let mut m = model.clone();
        let mut q = p.clone();
        let out = run_plasticity(&mut m, &mut q, &data, &plasticity_config(2, None, None)).unwrap();
        (m, out)
    };
    let (m1, a) = run();
    let (m2, b) = run();
    assert_eq!(m1, model);
    assert_eq!(m1, m2);
    assert_eq!(param_count(&a.final_params, false), param_count(&p, false));
    assert_eq!(a.report.params_total, param_count(&p, false));
    assert!(a.final_params.bit_eq(&b.final_params));
    assert!(a.best_params.bit_eq(&b.best_params));
    for (x, y) in a.records.iter().zip(&b.records) {
        assert!(x.same_outcome(y));
    }
    assert_eq!(a.report.total_epochs, 6);
    assert_eq!(a.report.curves.len(), 6);
    assert!(a.report.backward_ms_per_step.is_none() && a.report.params_trainable.is_none());
}

#[test]
fn plasticity_stage_three_continues_from_the_stage_two_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&small_spec(8)).unwrap();
    let model = small_model();
    let mut m = model.clone();
    let mut q = init(&model, 8);
    let config = plasticity_config(2, None, Some(dir.path().to_path_buf()));
    let out = run_plasticity(&mut m, &mut q, &data, &config).unwrap();

    let ck = load_checkpoint(dir.path(), "stage2-last").unwrap();
    assert!(ck.model.layers[0].width() > model.layers[0].width());
    let (mut m3, mut p3, mut ledger) = (ck.model, ck.params, ck.ledger);
    prune(&mut m3, &mut p3, &mut ledger).unwrap();
    p3.unfreeze_all();
    let o = TrainOptions {
        epochs: 2,
        optimizer: config.optimizer.clone(),
        shuffle_seed: config.shuffle_seed + 3,
        stage: "stage3".into(),
    };
    train_stage(&m3, &mut p3, &data, &o).unwrap();
    assert!(p3.bit_eq(&out.final_params));

    let last = load_checkpoint(dir.path(), "stage3-last").unwrap();
    assert!(last.params.bit_eq(&out.final_params));
    let best = load_checkpoint(dir.path(), "stage3-best").unwrap();
    assert!(best.params.bit_eq(&out.best_params));
    let log = std::fs::read_to_string(dir.path().join("stages.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

/// Mean of the top quarter of frequency bins minus the mean of the rest.
fn band_probe(e: &LabeledExample) -> f64 {
    let (f, t) = (e.features.shape()[0], e.features.shape()[1]);
    let cut = f - f / 4;
    let v = e.features.values();
    let hi: f64 = v[cut * t..].iter().sum::<f64>() / ((f - cut) * t) as f64;
    let lo: f64 = v[..cut * t].iter().sum::<f64>() / (cut * t) as f64;
    hi - lo
}

fn probe_eer(data: &Dataset) -> f64 {
    let scores: Vec<f64> = data.test.iter().map(band_probe).collect();
    let labels: Vec<Label> = data.test.iter().map(|e| e.label).collect();
    compute_eer(&ScoreSet::new(scores, labels).unwrap())
}

fn calib_spec(delta: f64, noise: f64) -> SynthSpec {
    SynthSpec {
        n_train: 10,
        n_dev: 10,
        n_test: 2000,
        artifact_strength: delta,
        noise_level: noise,
        seed: 21,
        ..SynthSpec::default()
    }
}

#[test]
fn artifact_strength_controls_separability() {
    let chance = probe_eer(&generate(&calib_spec(0.0, 0.5)).unwrap());
    assert!((0.4..=0.6).contains(&chance), "δ=0 probe EER {chance}");
    let clean = probe_eer(&generate(&calib_spec(1.0, 0.1)).unwrap());
    assert!(clean < 0.05, "δ=1 probe EER {clean}");
    let mut prev = f64::INFINITY;
    for delta in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let e = probe_eer(&generate(&calib_spec(delta, 0.5)).unwrap());
        assert!(e <= prev + 0.02, "δ={delta}: {e} after {prev}");
        prev = e;
    }
}

fn cam_model() -> ModelGraph {
    ModelGraph::from_spec(&spec("cam", InputSpec::Image, vec![conv(3, 1), dense(4)]), 5, 6).unwrap()
}

#[test]
fn gradcam_matches_a_hand_derived_gradient() {
    let model = cam_model();
    for seed in 0..5 {
        let p = init(&model, seed);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng(seed + 50));
        let (maps, _) = feature_maps_and_grads(&model, &p, &x, 0, 1).unwrap();
        let a = maps.values();
        let hw = 30;

        // logit_1 = Wh[1] · relu(Wd · vec(A) + bd) + bh[1]
        let wd = p.get("l1.weight").unwrap();
        let bd = p.get("l1.bias").unwrap();
        let wh = p.get("head.weight").unwrap();
        let mut grad = vec![0.0; 3 * hw];
        for u in 0..4 {
            let z: f64 = bd.values()[u] + (0..3 * hw).map(|k| wd.values()[u * 3 * hw + k] * a[k]).sum::<f64>();
            if z > 0.0 {
                for (k, gk) in grad.iter_mut().enumerate() {
                    *gk += wh.values()[4 + u] * wd.values()[u * 3 * hw + k];
                }
            }
        }
        let mut cam = vec![0.0; hw];
        for c in 0..3 {
            let alpha: f64 = grad[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
            for s in 0..hw {
                cam[s] += alpha * a[c * hw + s];
            }
        }
        let cam: Vec<f64> = cam.into_iter().map(|v| v.max(0.0)).collect();
        let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);

        let heat = gradcam(&model, &p, &x, 0, 1).unwrap();
        assert_eq!(heat.shape(), &[5, 6]);
        for (h, c) in heat.values().iter().zip(&cam) {
            let want = if hi > lo { (c - lo) / (hi - lo) } else { 0.0 };
            assert!((h - want).abs() < 1e-10, "seed {seed}");
            assert!((0.0..=1.0).contains(h));
        }
    }
}

#[test]
fn gradcam_of_an_unconnected_class_is_zero() {
    let model = cam_model();
    let mut p = init(&model, 1);
    let w = p.get_mut("head.weight").unwrap();
    w.values_mut()[4..].iter_mut().for_each(|v| *v = 0.0);
    let x = Tensor::randn(&[5, 6], 1.0, &mut rng(1));
    let heat = gradcam(&model, &p, &x, 0, 1).unwrap();
    assert!(heat.values().iter().all(|&v| v == 0.0));
}

#[test]
fn gradcam_rejects_non_conv_targets() {
    let model = cam_model();
    let p = init(&model, 1);
    let x = Tensor::zeros(&[5, 6]);
    assert!(gradcam(&model, &p, &x, 1, 1).is_err());
    assert!(gradcam(&model, &p, &x, 9, 1).is_err());
    assert!(gradcam(&model, &p, &x, 0, 2).is_err());
    assert!(gradcam(&model, &p, &Tensor::zeros(&[4, 6]), 0, 1).is_err());
}

#[test]
fn model_forward_golden_value() {
    let model = small_model();
    let p = init(&model, 2024);
    let x = Tensor::randn(&model.input_shape(1), 1.0, &mut rng(2025));
    let logits = model_forward(&model, &p, &x).unwrap();
    let golden = [GOLDEN_0, GOLDEN_1];
    for (v, g) in logits.values().iter().zip(golden) {
        assert!((v - g).abs() < 1e-12, "{:?}", logits.values());
    }
}

const GOLDEN_0: f64 = 0.911199528407652;
const GOLDEN_1: f64 = 0.842840322037507;

fn tiny_experiment(strategy: Strategy, dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(strategy);
    c.data = small_spec(30);
    c.model = spec("tiny", InputSpec::Image, vec![conv(2, 1), conv(3, 2), dense(4)]);
    c.epochs = 2;
    c.pretrain_epochs = 1;
    c.plasticity.epochs_per_stage = 1;
    c.optimizer.batch_size = 8;
    c.timing.warmup = 1;
    c.timing.iters = 2;
    c.output_dir = Some(dir.to_path_buf());
    c
}

#[test]
fn harness_runs_are_deterministic_apart_from_timing() {
    for strategy in Strategy::ALL {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run_experiment(&tiny_experiment(strategy, d1.path())).unwrap();
        let b = run_experiment(&tiny_experiment(strategy, d2.path())).unwrap();
        let strip = |r: &RunReport| {
            let mut f = r.csv_fields().to_vec();
            f.remove(4);
            f
        };
        assert_eq!(strip(&a.report), strip(&b.report), "{strategy}");
        assert_eq!(a.report.curves, b.report.curves, "{strategy}");
        assert!(a.params.bit_eq(&b.params), "{strategy}");
        let back = read_reports(&d1.path().join("report.csv")).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].strategy, strategy);
        assert!(d1.path().join("final-best.dpck").exists());
        assert!(d1.path().join("config.toml").exists());
    }
}

#[test]
fn report_rows_round_trip_through_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let d = tempfile::tempdir().unwrap();
    let base = run_experiment(&tiny_experiment(Strategy::Baseline, d.path())).unwrap().report;
    let mut plast = base.clone();
    plast.strategy = Strategy::Plasticity;
    plast.backward_ms_per_step = None;
    plast.params_trainable = None;
    emit_report(&base, &path).unwrap();
    emit_report(&plast, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(2).unwrap().contains(",/,"));
    let back = read_reports(&path).unwrap();
    assert_eq!(back, vec![base.clone(), plast]);
    let mut bad = base;
    bad.backward_ms_per_step = None;
    assert!(emit_report(&bad, &path).is_err());
}

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dropin_core::data::{batch_tensors, generate, SynthSpec};
use dropin_core::growth::{apply_freeze, dropin, DropinPlan, FreezePolicy, NeuronLedger};
use dropin_core::harness::toy_cnn;
use dropin_core::layers::ModelGraph;
use dropin_core::optim::{Optimizer, OptimizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn backward_step(c: &mut Criterion) {
    let spec = SynthSpec {
        n_train: 32,
        n_dev: 2,
        n_test: 2,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let base = ModelGraph::from_spec(&toy_cnn(), spec.freq_bins, spec.time_frames).unwrap();
    let params = base.init_params(&mut ChaCha8Rng::seed_from_u64(7));
    let idx: Vec<usize> = (0..32).collect();

    let mut grown = base.clone();
    let mut frozen = params.clone();
    let mut ledger = NeuronLedger::new(&grown);
    dropin(&mut grown, &mut frozen, &mut ledger, &DropinPlan::new([1])).unwrap();
    apply_freeze(&mut frozen, &ledger, FreezePolicy::Frozen).unwrap();
    let mut unfrozen = frozen.clone();
    unfrozen.unfreeze_all();

    let cases = [
        ("baseline", &base, params),
        ("dropin_unfrozen", &grown, unfrozen),
        ("dropin_frozen", &grown, frozen),
    ];
    let mut group = c.benchmark_group("backward_step");
    for (name, model, store) in cases {
        let (x, y) = batch_tensors(&data.train, &idx, model.input);
        let (mut graph, _) = model.build_loss_graph(32);
        let mut work = store.clone();
        let mut opt = Optimizer::new(OptimizerConfig::default());
        graph.forward(&[x, y], &work).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let grads = graph.backward(&work).unwrap();
                opt.step(&mut work, &grads).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, backward_step);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dropin_core::eval::{compute_eer, eer_bruteforce, ScoreSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn score_set(n: usize) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let spoof: Vec<f64> = (0..n / 2).map(|_| rng.random::<f64>() + 0.3).collect();
    let bona: Vec<f64> = (0..n - n / 2).map(|_| rng.random::<f64>()).collect();
    ScoreSet::from_classes(&bona, &spoof).unwrap()
}

fn eer(c: &mut Criterion) {
    let mut group = c.benchmark_group("eer");
    for n in [500, 5_000, 50_000] {
        let set = score_set(n);
        group.bench_with_input(BenchmarkId::new("sorted_sweep", n), &set, |b, s| b.iter(|| compute_eer(s)));
    }
    let small = score_set(500);
    group.bench_with_input(BenchmarkId::new("brute_force", 500), &small, |b, s| b.iter(|| eer_bruteforce(s)));
    group.finish();
}

criterion_group!(benches, eer);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revbio_core::registry::Mutation;
use revbio_core::sim::haar_orthogonal;
use revbio_core::{
    cosine_similarity, d_prime, fmr_threshold, FeatureVector, ModelInstanceId, Registry, ScoreSet,
    ThresholdMode,
};

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn vector(rng: &mut ChaCha8Rng, dim: usize) -> FeatureVector {
    FeatureVector::new((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn bench_cosine(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("cosine");
    for dim in [128, 512] {
        let (a, b) = (vector(&mut rng, dim), vector(&mut rng, dim));
        group.throughput(Throughput::Elements(dim as u64));
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |bch, _| {
            bch.iter(|| cosine_similarity(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let impostor = uniform(&mut rng, 1_000_000);
    let genuine = uniform(&mut rng, 1_200);
    let mut group = c.benchmark_group("metrics");
    group.sample_size(20);
    group.bench_function("fmr_threshold_1e6", |b| {
        b.iter(|| fmr_threshold(black_box(&impostor), 1e-4).unwrap())
    });
    let set = ScoreSet::new(genuine, impostor.clone());
    group.bench_function("d_prime_1e6", |b| {
        b.iter(|| d_prime(black_box(&set)).unwrap())
    });
    group.finish();
}

fn bench_lookup(c: &mut Criterion) {
    const N: usize = 100_000;
    let mut reg = Registry::new(8, ThresholdMode::PerInstance);
    let m0 = ModelInstanceId::new("m0");
    reg.register_instance(m0.clone(), None, 1).unwrap();
    let names: Vec<String> = (0..N).map(|i| format!("user-{i:07}")).collect();
    for name in &names {
        let at = reg.next_timestamp(1);
        reg.apply(&Mutation::Enroll {
            identity: name.clone(),
            instance: m0.clone(),
            template: vec![1.0; 8],
            at,
        })
        .unwrap();
    }
    let mut i = 0usize;
    c.bench_function("registry_lookup_1e5", |b| {
        b.iter(|| {
            i = (i + 7919) % N;
            reg.lookup(black_box(&names[i])).unwrap().enrolled_at
        })
    });
}

fn bench_haar(c: &mut Criterion) {
    let mut group = c.benchmark_group("haar_orthogonal");
    group.sample_size(10);
    for dim in [64, 256, 512] {
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, &dim| {
            let mut seed = 0u64;
            b.iter(|| {
                seed += 1;
                haar_orthogonal(seed, dim)
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_cosine,
    bench_metrics,
    bench_lookup,
    bench_haar
);
criterion_main!(benches);

//! Hot paths of a simulation: local SGD, pairwise similarity and Louvain.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use flic_core::clustering::{build_graph, louvain};
use flic_core::data::synthetic_blobs;
use flic_core::model::{client_update, LocalTraining};
use flic_core::{ModelSpec, ParamVector, SimilarityMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

/// Updates drawn around `groups` random directions, so the graph has structure.
fn clustered_updates(n: usize, dim: usize, groups: usize, seed: u64) -> Vec<(usize, ParamVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..groups).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|k| {
            let v = centres[k % groups].iter().map(|c| c + 0.5 * rng.random_range(-1.0..1.0)).collect();
            (k, ParamVector::new(v, 0))
        })
        .collect()
}

fn bench_client_update(c: &mut Criterion) {
    let data = synthetic_blobs(100, 10, 20, 1.0, 1.0, 7).unwrap();
    let spec = ModelSpec::mlp(20, vec![32], 10).unwrap();
    let w = spec.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let training = LocalTraining { epochs: 2, batch_size: 10, learning_rate: 0.05 };
    c.bench_function("client_update mlp 20-32-10, 100 samples, E=2", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(3),
            |mut rng| client_update(&spec, black_box(&w), &data.samples, &training, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_similarity(c: &mut Criterion) {
    let updates = clustered_updates(100, 1000, 5, 11);
    c.bench_function("similarity 100 clients x 1000 params", |b| {
        b.iter(|| SimilarityMatrix::from_updates(100, black_box(&updates), 1).unwrap())
    });
}

fn bench_louvain(c: &mut Criterion) {
    for n in [20, 100] {
        let s = SimilarityMatrix::from_updates(n, &clustered_updates(n, 200, 5, 13), 1).unwrap();
        let graph = build_graph(&s, true);
        c.bench_function(&format!("louvain {n} nodes, complete graph"), |b| b.iter(|| louvain(black_box(&graph))));
    }
}

criterion_group!(benches, bench_client_update, bench_similarity, bench_louvain);
criterion_main!(benches);

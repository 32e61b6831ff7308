use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icl_core::retriever::{bm25_contexts, topk_retrieve, votek_select, Bm25Index, DemoOrder, EmbeddingMatrix};

const INDEX: usize = 2000;
const QUERIES: usize = 500;
const DIM: usize = 128;

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
    let rows = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    EmbeddingMatrix::from_rows(rows).unwrap()
}

fn random_docs(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(5..30);
            (0..len).map(|_| format!("t{}", rng.random_range(0..400))).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

// "sequential" runs the same code on a one-thread pool.
fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn bench_topk(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let index = random_matrix(&mut rng, INDEX, DIM);
    let queries = random_matrix(&mut rng, QUERIES, DIM);
    let mut group = c.benchmark_group("topk");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| topk_retrieve(&index, &queries, 8).unwrap()))
        });
    }
    group.finish();
}

fn bench_bm25(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let docs = random_docs(&mut rng, INDEX);
    let queries = random_docs(&mut rng, QUERIES);
    let index = Bm25Index::build(&docs, 1.5, 0.75).unwrap();
    let mut group = c.benchmark_group("bm25");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| bm25_contexts(&index, &queries, 8, DemoOrder::NearestLast)))
        });
    }
    group.finish();
}

fn bench_votek(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let emb = random_matrix(&mut rng, 1000, 64);
    let mut group = c.benchmark_group("votek");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| votek_select(&emb, 16, 10, 10.0).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_topk, bench_bm25, bench_votek);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lata_bench::{dataset, pool, zero_shot};
use lata_core::harness::{run_window, WindowSettings};
use lata_core::refine::refine;
use lata_core::{build_graph, FailureAwareParams, HeuristicProvider, RefineConfig, ScoreRule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

const N: usize = 256;
const C: usize = 10;
const D: usize = 64;

fn knn_graph(c: &mut Criterion) {
    let data = dataset(N, C, D, 40);
    let items = pool(&data);
    let mut g = c.benchmark_group("knn_graph");
    for k in [5, 15, 30] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| build_graph(black_box(&items), k, None).unwrap())
        });
    }
    g.finish();
}

fn refinement(c: &mut Criterion) {
    let data = dataset(N, C, D, 40);
    let items = pool(&data);
    let q = zero_shot(&data, &items);
    let graph = build_graph(&items, 15, None).unwrap();
    let mut g = c.benchmark_group("refine");
    for t in [4, 8, 12] {
        let cfg = RefineConfig {
            t_iter: t,
            ..RefineConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(t), &cfg, |b, cfg| {
            b.iter(|| refine(black_box(&q), &graph, cfg, None).unwrap())
        });
    }
    g.finish();
}

fn full_window(c: &mut Criterion) {
    let n_cal = 40;
    let data = dataset(N + 200, C, D, 200);
    let cal = &data.cal[..n_cal];
    let batch = &data.test[..N - n_cal];
    let settings = WindowSettings {
        bank: &data.bank,
        provider: &HeuristicProvider,
        tau: 1.0,
        k: 15,
        sigma: None,
        refine: RefineConfig::default(),
        prior: None,
        rule: ScoreRule::default(),
        failure: FailureAwareParams::default(),
        alpha: 0.1,
    };
    c.bench_function("window_n256_c10", |b| {
        b.iter(|| run_window(cal, batch, &settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap())
    });
}

criterion_group!(benches, knn_graph, refinement, full_window);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reformulator::solver::{solve_all, solve_exact, success_vector_bfs};
use reformulator::{SolveConfig, SolveMethod, StateId};
use reformulator_bench::{planted_graph, synthetic_graph};

fn single_source(c: &mut Criterion) {
    let mut group = c.benchmark_group("single_source");
    for states in [50, 200, 1000] {
        let graph = synthetic_graph(states);
        let cfg = SolveConfig::default();
        group.bench_with_input(BenchmarkId::new("exact", states), &graph, |b, g| {
            b.iter(|| solve_exact(g, StateId(0)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("bfs", states), &graph, |b, g| {
            b.iter(|| success_vector_bfs(g, StateId(0), &cfg).unwrap())
        });
    }
    group.finish();
}

fn all_sources(c: &mut Criterion) {
    let graph = planted_graph(2000);
    let mut group = c.benchmark_group("all_sources_planted");
    for method in [SolveMethod::Exact, SolveMethod::BoundedBfs] {
        let cfg = SolveConfig {
            method,
            ..SolveConfig::default()
        };
        group.bench_function(format!("{method:?}"), |b| b.iter(|| solve_all(&graph, &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, single_source, all_sources);
criterion_main!(benches);

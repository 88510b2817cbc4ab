//! Parallel-versus-sequential comparison on the two sweep workloads that
//! dominate real runs: sampling the commutator Gram matrix over a torus
//! grid, and integrating a flow map from every grid node.
//!
//! `par::map` uses the rayon pool when the default `parallel` feature is
//! on; `par::map_seq` is the single-threaded reference. Benchmarking both
//! from the same binary shows the speedup without rebuilding.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use subelliptic::flows::integrate_flow;
use subelliptic::grid::TorusGrid;
use subelliptic::hormander::CommutatorTable;
use subelliptic::par;
use subelliptic::FieldSystem;

fn gram_sampling(c: &mut Criterion) {
    let sys = FieldSystem::grushin();
    let table = CommutatorTable::new(&sys, 2).unwrap();
    let points = TorusGrid::new(2, 64).points();

    let mut group = c.benchmark_group("gram_min_eigenvalue_64x64");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            par::map(black_box(&points), |x| {
                table.cr_matrix(x, 2).min_eigenvalue()
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            par::map_seq(black_box(&points), |x| {
                table.cr_matrix(x, 2).min_eigenvalue()
            })
        })
    });
    group.finish();
}

fn flow_map(c: &mut Criterion) {
    let sys = FieldSystem::grushin();
    let field = sys.fields()[1].clone();
    let points = TorusGrid::new(2, 16).points();

    let mut group = c.benchmark_group("flow_map_16x16");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            par::map(black_box(&points), |x| {
                integrate_flow(&field, x, 0.5, 1e-10).unwrap().endpoint
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            par::map_seq(black_box(&points), |x| {
                integrate_flow(&field, x, 0.5, 1e-10).unwrap().endpoint
            })
        })
    });
    group.finish();
}

criterion_group!(benches, gram_sampling, flow_map);
criterion_main!(benches);

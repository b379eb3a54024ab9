use std::hint::black_box;

use cgr::losses::linear_sum_assignment;
use cgr_bench::random_cost;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn assignment(c: &mut Criterion) {
    let mut g = c.benchmark_group("linear_sum_assignment");
    for (rows, cols) in [(6, 24), (24, 24), (64, 64)] {
        let cost = random_cost(rows, cols, 1);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &cost, |b, cost| {
            b.iter(|| linear_sum_assignment(black_box(cost)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, assignment);
criterion_main!(benches);

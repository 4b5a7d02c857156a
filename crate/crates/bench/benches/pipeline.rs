//! Benchmarks of the hot paths: the policy fixed point, the induced chain,
//! the price-duration curve, and hedge settlement of a simulated path.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use gridstore::hedging::settlement_table;
use gridstore::investment::price_duration_curve;
use gridstore::markov::{stationary_distribution, transition_matrix};
use gridstore::montecarlo::simulate;
use gridstore::policy::{solve_policy, SolveOptions};

use gridstore_bench::{linear_case, solved_linear_case};

fn bench_solve_policy(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_policy");
    group.sample_size(10);
    for points in [41, 101] {
        let (curve, grid, loads) = linear_case(20.0, points);
        group.bench_function(format!("linear_{points}x{points}"), |b| {
            b.iter(|| {
                solve_policy(
                    black_box(&curve),
                    black_box(&grid),
                    black_box(&loads),
                    &SolveOptions::default(),
                )
                .expect("converges")
            })
        });
    }
    group.finish();
}

fn bench_chain(c: &mut Criterion) {
    let solution = solved_linear_case(20.0, 101);
    c.bench_function("transition_and_stationary_101", |b| {
        b.iter(|| {
            let m = transition_matrix(black_box(&solution));
            stationary_distribution(&m, 1e-12, 1_000_000).expect("converges")
        })
    });
}

fn bench_pd_curve(c: &mut Criterion) {
    let solution = solved_linear_case(20.0, 101);
    let x = stationary_distribution(&transition_matrix(&solution), 1e-12, 1_000_000)
        .expect("converges");
    c.bench_function("price_duration_curve_101", |b| {
        b.iter(|| price_duration_curve(black_box(&solution), black_box(&x)))
    });
}

fn bench_settlement(c: &mut Criterion) {
    let solution = solved_linear_case(20.0, 101);
    let traj = simulate(&solution, 10_000, 42);
    c.bench_function("settlement_10k_intervals", |b| {
        b.iter_batched(
            || traj.clone(),
            |t| settlement_table(black_box(&t), &solution).expect("consistent"),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(
    benches,
    bench_solve_policy,
    bench_chain,
    bench_pd_curve,
    bench_settlement
);
criterion_main!(benches);

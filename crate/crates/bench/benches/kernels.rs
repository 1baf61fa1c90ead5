use std::hint::black_box;

use convexopt_core::linalg::CyclicBanded;
use convexopt_core::{
    builtin, gradient, make_grid, recover_multipliers, solve, Params, ProblemSpec, RadialFunction,
    SolverOptions,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

/// A Newton-like matrix: `AᵀDA` plus a diagonal, half-bandwidth 2.
fn pentadiagonal(n: usize) -> CyclicBanded {
    let mut m = CyclicBanded::zeros(n, 2);
    for i in 0..n {
        m.add(i, 0, 6.0 + (i as f64).sin());
        m.add(i, 1, -4.0);
        m.add(i, 2, 1.0);
    }
    m.shift(0.5);
    m
}

fn cholesky(c: &mut Criterion) {
    let mut g = c.benchmark_group("cyclic_cholesky");
    for n in [256, 1024, 4096] {
        let m = pentadiagonal(n);
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).cos()).collect();
        g.bench_with_input(BenchmarkId::new("factor", n), &m, |b, m| {
            b.iter(|| black_box(m.cholesky()))
        });
        let f = m.cholesky().expect("positive definite");
        g.bench_with_input(BenchmarkId::new("solve", n), &rhs, |b, r| {
            b.iter(|| black_box(f.solve(r)))
        });
    }
    g.finish();
}

fn assembly(c: &mut Criterion) {
    let mut g = c.benchmark_group("assembly");
    let spec = builtin("crouzeix", &Params::new()).unwrap();
    for n in [256, 1024] {
        let grid = make_grid(n).unwrap();
        let u = RadialFunction::from_fn(grid, |t| 1.5 + 0.2 * (3.0 * t).cos()).unwrap();
        g.bench_with_input(BenchmarkId::new("gradient", n), &u, |b, u| {
            b.iter(|| black_box(gradient(&spec, u)))
        });
        g.bench_with_input(BenchmarkId::new("hessian", n), &u, |b, u| {
            b.iter(|| black_box(convexopt_core::functional::hessian(&spec, u)))
        });
    }
    g.finish();
}

fn small_solves(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    let options = SolverOptions::default();
    for name in ["quad_circle", "crouzeix"] {
        let problem =
            ProblemSpec::annulus(builtin(name, &Params::new()).unwrap(), 1.0, 2.0, 64).unwrap();
        g.bench_function(BenchmarkId::new(name, 64), |b| {
            b.iter(|| black_box(solve(&problem, &options)))
        });
    }
    let problem =
        ProblemSpec::annulus(builtin("crouzeix", &Params::new()).unwrap(), 1.0, 2.0, 128).unwrap();
    let u = solve(&problem, &options).unwrap().u_star;
    g.bench_function("certificate/crouzeix/128", |b| {
        b.iter(|| black_box(recover_multipliers(&u, &problem)))
    });
    g.finish();
}

criterion_group!(benches, cholesky, assembly, small_solves);
criterion_main!(benches);

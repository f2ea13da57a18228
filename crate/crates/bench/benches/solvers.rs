use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kolmo_core::backward::TerminalData;
use kolmo_core::derivative::{assemble_kernel, KernelOptions};
use kolmo_core::models::{kuramoto, linear_functional};
use kolmo_core::multiindex::{capital_lambda_seq, lambda_seq};
use kolmo_core::particles::simulate_particles;
use kolmo_core::{solve_fp, solve_v, Grid, GridFunction, GridMeasure, SolveConfig};

fn setup(m: usize) -> (kolmo_core::models::ConvolutionDrift, GridMeasure, GridFunction) {
    let g = Grid::new(m).unwrap();
    let b = kuramoto(g, 5.0).unwrap();
    let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
    let xi = GridFunction::from_fn(g, |x| (2.0 * PI * x).cos()).unwrap();
    (b, mu, xi)
}

fn pde(c: &mut Criterion) {
    let (b, mu, xi) = setup(256);
    let cfg = SolveConfig::with_dt(1e-4);
    c.bench_function("forward M=256 500 steps", |bench| {
        bench.iter(|| solve_fp(&b, black_box(&mu), 0.05, &cfg).unwrap())
    });
    let base = solve_fp(&b, &mu, 0.05, &cfg).unwrap();
    c.bench_function("backward M=256 500 steps", |bench| {
        bench.iter(|| solve_v(&b, &base, &TerminalData { xi: xi.clone(), t: 0.05 }).unwrap())
    });
}

fn kernels(c: &mut Criterion) {
    let (b, mu, xi) = setup(64);
    let phi = linear_functional(&xi);
    let cfg = SolveConfig::with_dt(1e-3);
    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    group.bench_function("k=1 M=64 full grid", |bench| {
        bench.iter(|| assemble_kernel(1, &b, &phi, 0.05, &mu, &KernelOptions::full_grid(), &cfg).unwrap())
    });
    group.bench_function("k=2 M=64 stride 8", |bench| {
        let opts = KernelOptions::default().with_stride(8);
        bench.iter(|| assemble_kernel(2, &b, &phi, 0.05, &mu, &opts, &cfg).unwrap())
    });
    group.finish();
}

fn particles(c: &mut Criterion) {
    let (b, mu, _) = setup(256);
    c.bench_function("particles N=400 100 steps", |bench| {
        bench.iter(|| simulate_particles(&b, &mu, 400, 0.01, 1e-4, black_box(7)).unwrap())
    });
}

fn indices(c: &mut Criterion) {
    c.bench_function("lambda_5 and Lambda_6", |bench| {
        bench.iter(|| (lambda_seq(black_box(5)).unwrap().len(), capital_lambda_seq(black_box(6)).unwrap().len()))
    });
}

criterion_group!(benches, pde, kernels, particles, indices);
criterion_main!(benches);

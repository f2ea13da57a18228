//! End-to-end use of the public API on small grids.

use std::f64::consts::PI;

use kolmo_core::derivative::{assemble_kernel, KernelOptions};
use kolmo_core::models::{linear_functional, ModelSpec};
use kolmo_core::torus::wasserstein1;
use kolmo_core::{solve_fp, solve_m1, Grid, GridFunction, GridMeasure, SolveConfig, TestFunctional};

#[test]
fn model_file_to_kernel_pairing() {
    let dir = std::env::temp_dir().join(format!("kolmo-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.conf");
    std::fs::write(&path, "model = kuramoto\nK = 3 # moderate coupling\n").unwrap();
    let g = Grid::new(64).unwrap();
    let b = ModelSpec::read(&path).unwrap().build(g).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();

    let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
    let mu_hat = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).sin()).unwrap();
    let phi = linear_functional(&GridFunction::from_fn(g, |x| (2.0 * PI * x).cos()).unwrap());
    let cfg = SolveConfig::with_dt(2e-4);
    let t = 0.05;

    // δU/δm paired with μ̂ − μ is the derivative of U along the segment,
    // which for a linear Φ is ∫g dm^(1)
    let kernel = assemble_kernel(1, &b, &phi, t, &mu, &KernelOptions::full_grid(), &cfg).unwrap();
    let d = mu_hat.minus(&mu).unwrap();
    let via_kernel = kernel.pair(&[&d]).unwrap();
    let base = solve_fp(&b, &mu, t, &cfg).unwrap();
    let m1 = solve_m1(&b, &base, &mu_hat, &cfg).unwrap().final_field();
    let via_m1 = m1.pair(&GridFunction::from_fn(g, |x| (2.0 * PI * x).cos()).unwrap()).unwrap();
    assert!((via_kernel - via_m1).abs() < 1e-5, "{via_kernel} vs {via_m1}");

    // and a small step along the segment moves U by about ε times that
    let eps = 1e-3;
    let u0 = phi.eval(base.snapshot(base.steps()));
    let moved = solve_fp(&b, &mu.mix(&mu_hat, eps).unwrap(), t, &cfg).unwrap();
    let u1 = phi.eval(moved.snapshot(moved.steps()));
    assert!(((u1 - u0) / eps - via_kernel).abs() < 1e-3);
    assert!(wasserstein1(&mu, &mu_hat).unwrap() > 0.0);
}

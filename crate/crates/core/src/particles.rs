//! Interacting particle system `dY_i = b(Y_i, μ^N) dt + √2 dW_i` on the circle
//! and its weak-error study against the mean-field limit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{solve_fp, SolveConfig};
use crate::models::{DriftModel, TestFunctional};
use crate::stats::{mean_and_stderr, weighted_line};
use crate::torus::{fmt_float, interpolate, Grid, GridMeasure};

/// Sampler for the periodic piecewise-linear interpolant of a grid density.
#[derive(Debug, Clone)]
pub struct InverseCdf {
    dx: f64,
    density: Vec<f64>,
    cumulative: Vec<f64>,
}

impl InverseCdf {
    pub fn new(mu: &GridMeasure) -> Self {
        let dx = mu.grid().dx();
        let p = mu.values();
        let m = p.len();
        let mut cumulative = Vec::with_capacity(m + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for j in 0..m {
            acc += 0.5 * dx * (p[j] + p[(j + 1) % m]);
            cumulative.push(acc);
        }
        Self {
            dx,
            density: p.to_vec(),
            cumulative,
        }
    }

    /// The point `x ∈ [0, 1)` with `CDF(x) = u`, `u ∈ [0, 1)`.
    pub fn sample(&self, u: f64) -> f64 {
        let m = self.density.len();
        let target = u * self.cumulative[m];
        let j = match self.cumulative.binary_search_by(|c| c.total_cmp(&target)) {
            Ok(j) => j.min(m - 1),
            Err(j) => j - 1,
        };
        let r = target - self.cumulative[j];
        let p0 = self.density[j];
        let a = (self.density[(j + 1) % m] - p0) / (2.0 * self.dx);
        // root of a s² + p0 s = r in the stable form
        let s = 2.0 * r / (p0 + (p0 * p0 + 4.0 * a * r).max(0.0).sqrt());
        let x = (j as f64 + 0.0) * self.dx + s.clamp(0.0, self.dx);
        x.rem_euclid(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub n: usize,
    pub positions: Vec<f64>,
    pub seed: u64,
}

#[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail the guard
fn steps_for(t: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !(t >= 0.0) || dt > t.max(dt) {
        return Err(Error::Parameter(format!("need 0 < dt ≤ T, got dt = {dt}, T = {t}")));
    }
    if t == 0.0 {
        return Ok((0, dt));
    }
    let steps = (t / dt - 1e-9).ceil().max(1.0) as usize;
    Ok((steps, t / steps as f64))
}

/// Euler–Maruyama with increments `√(2 dt) Z`, initial positions i.i.d. from
/// `mu0` by inverse-CDF sampling. `N = 1` is allowed (the measure is a Dirac).
pub fn simulate_particles(
    model: &dyn DriftModel,
    mu0: &GridMeasure,
    n: usize,
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<ParticleEnsemble> {
    model.grid().check(&mu0.grid())?;
    if n == 0 {
        return Err(Error::Parameter("no particles".into()));
    }
    let (steps, dt) = steps_for(t, dt)?;
    let sampler = InverseCdf::new(mu0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<f64> = (0..n).map(|_| sampler.sample(rng.random::<f64>())).collect();
    let w = vec![1.0 / n as f64; n];
    let mut b = vec![0.0; n];
    let sd = (2.0 * dt).sqrt();
    for _ in 0..steps {
        model.drift_empirical(&y, &y, &w, &mut b);
        for (yi, bi) in y.iter_mut().zip(&b) {
            let z: f64 = rng.sample(StandardNormal);
            let v = *yi + bi * dt + sd * z;
            *yi = v - v.floor();
        }
    }
    // v - floor(v) can round up to exactly 1.0
    y.iter_mut().filter(|v| **v >= 1.0).for_each(|v| *v = 0.0);
    Ok(ParticleEnsemble {
        n,
        positions: y,
        seed,
    })
}

/// Seed of replication `rep` at size `n`.
pub fn replication_seed(base: u64, rep: u64, n: usize) -> u64 {
    base ^ rep ^ ((n as u64) << 32)
}

/// `Φ(μ^N_T)` for each replication, in replication order.
#[allow(clippy::too_many_arguments)]
pub fn replicate(
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    mu0: &GridMeasure,
    n: usize,
    reps: usize,
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    replicate_range(model, phi, mu0, n, 0..reps as u64, t, dt, seed)
}

/// As [`replicate`], for replication indices `reps` only.
#[allow(clippy::too_many_arguments)]
pub fn replicate_range(
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    mu0: &GridMeasure,
    n: usize,
    reps: std::ops::Range<u64>,
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    reps.into_par_iter()
        .map(|r| {
            let e = simulate_particles(model, mu0, n, t, dt, replication_seed(seed, r, n))?;
            Ok(phi.eval_empirical(&e.positions))
        })
        .collect()
}

/// `Φ` of the `N → ∞` limit of the time-discrete particle scheme: the law of
/// `Y + b(Y, law) dt + √(2dt) Z` propagated by its transition kernel on a
/// grid with `fine_m` nodes (a multiple of the model grid).
pub fn discrete_mv_reference(
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    mu0: &GridMeasure,
    t: f64,
    dt: f64,
    fine_m: usize,
) -> Result<f64> {
    let fine = Grid::new(fine_m)?;
    let (steps, dt) = steps_for(t, dt)?;
    let dx = fine.dx();
    let x: Vec<f64> = fine.nodes().collect();
    let mut m: Vec<f64> = x.iter().map(|&v| interpolate(mu0.values(), v)).collect();
    let mass: f64 = m.iter().sum::<f64>() * dx;
    m.iter_mut().for_each(|v| *v /= mass);
    let var = 2.0 * dt;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    // offsets lo..=hi visit each node at most once
    let reach = ((12.0 * var.sqrt()) / dx).ceil() as isize;
    let half = fine_m as isize / 2;
    let (lo, hi) = if 2 * reach + 1 > fine_m as isize {
        (-half, fine_m as isize - half - 1)
    } else {
        (-reach, reach)
    };
    let mut b = vec![0.0; fine_m];
    for _ in 0..steps {
        let w: Vec<f64> = m.iter().map(|v| v * dx).collect();
        model.drift_empirical(&x, &x, &w, &mut b);
        let mut next = vec![0.0; fine_m];
        for i in 0..fine_m {
            let centre = x[i] + b[i] * dt;
            let c = (centre / dx).round() as isize;
            for off in lo..=hi {
                let j = (c + off).rem_euclid(fine_m as isize) as usize;
                let mut d = x[j] - centre;
                d -= d.round();
                next[j] += w[i] * norm * (-d * d / (2.0 * var)).exp();
            }
        }
        // renormalize away the truncation and quadrature defects
        let total: f64 = next.iter().sum::<f64>() * dx;
        m = next.into_iter().map(|v| v / total).collect();
    }
    let w: Vec<f64> = m.iter().map(|v| v * dx).collect();
    Ok(phi.eval_weighted(&x, &w))
}

/// `Φ(m(T, μ0))` from the PDE solver at the model grid.
pub fn pde_reference(
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    mu0: &GridMeasure,
    t: f64,
    cfg: &SolveConfig,
) -> Result<f64> {
    let path = solve_fp(model, mu0, t, cfg)?;
    Ok(phi.eval(path.snapshot(path.steps())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosConfig {
    pub ns: Vec<usize>,
    pub reps: usize,
    pub t: f64,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosRow {
    pub n: usize,
    pub mean_error: f64,
    pub stderr: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosReport {
    pub rows: Vec<ChaosRow>,
    /// Fitted exponent of `|mean_error| ∝ N^slope`.
    pub slope: f64,
    /// 95% half-width of the slope from the Monte Carlo errors.
    pub half_width: f64,
    /// Fitted constant `c` in `mean_error ≈ c / N`.
    pub constant: f64,
    pub reference: f64,
    /// `|reference(dt) − reference(dt/2)|`, the time-step sensitivity of the limit.
    pub time_step_shift: f64,
    /// `Φ(μ^N_T)` per replication, one vector per row.
    pub replications: Vec<Vec<f64>>,
}

impl ChaosReport {
    /// CSV `N,mean_error,stderr,reps`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,mean_error,stderr,reps\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.n,
                fmt_float(r.mean_error),
                fmt_float(r.stderr),
                r.reps
            ));
        }
        out
    }

    /// `|mean error| / combined standard error` at the largest `N`.
    pub fn largest_n_z(&self, reference_error: f64) -> f64 {
        let last = self.rows.last().expect("report has rows");
        last.mean_error.abs() / (last.stderr.powi(2) + reference_error.powi(2)).sqrt()
    }

    /// True when halving `dt` moves the limit by ≥ 10% of the smallest signal.
    pub fn time_step_flagged(&self) -> bool {
        let n = self.rows.last().map_or(1, |r| r.n) as f64;
        self.time_step_shift >= 0.1 * (self.constant / n).abs()
    }
}

/// Weighted nonlinear least squares `e_N ≈ C N^p` with weights `1/se²`,
/// started from the log-log fit; returns `(p, 95% half-width of p, C)`.
///
/// Fitting the raw errors avoids the downward bias of `log|e|` when the
/// signal at large `N` is only a few standard errors.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail the guard
fn fit_rate(rows: &[ChaosRow]) -> (f64, f64, f64) {
    let x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.stderr.powi(-2)).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.mean_error.abs().ln()).collect();
    let lw: Vec<f64> = rows.iter().map(|r| (r.mean_error / r.stderr).powi(2)).collect();
    let (mut p, icpt, _) = weighted_line(&x, &ly, &lw);
    // sign from the best-resolved row
    let sign = rows
        .iter()
        .max_by(|a, b| (a.mean_error / a.stderr).abs().total_cmp(&(b.mean_error / b.stderr).abs()))
        .map_or(1.0, |r| r.mean_error.signum());
    let mut c = sign * icpt.exp();
    let cost = |c: f64, p: f64| -> f64 {
        rows.iter()
            .zip(&x)
            .zip(&w)
            .map(|((r, lx), w)| w * (r.mean_error - c * (p * lx).exp()).powi(2))
            .sum()
    };
    let normal = |c: f64, p: f64| -> [f64; 5] {
        // [J'WJ (3 entries), J'W r (2 entries)]
        let mut a = [0.0; 5];
        for ((r, lx), w) in rows.iter().zip(&x).zip(&w) {
            let f = (p * lx).exp();
            let (jc, jp) = (f, c * f * lx);
            let res = r.mean_error - c * f;
            a[0] += w * jc * jc;
            a[1] += w * jc * jp;
            a[2] += w * jp * jp;
            a[3] += w * jc * res;
            a[4] += w * jp * res;
        }
        a
    };
    for _ in 0..100 {
        let a = normal(c, p);
        let det = a[0] * a[2] - a[1] * a[1];
        if !(det.abs() > 0.0) {
            break;
        }
        let dc = (a[2] * a[3] - a[1] * a[4]) / det;
        let dp = (a[0] * a[4] - a[1] * a[3]) / det;
        let before = cost(c, p);
        let mut step = 1.0;
        while step > 1e-6 && cost(c + step * dc, p + step * dp) > before {
            step *= 0.5;
        }
        c += step * dc;
        p += step * dp;
        if (step * dp).abs() < 1e-12 {
            break;
        }
    }
    let a = normal(c, p);
    let det = a[0] * a[2] - a[1] * a[1];
    let var_p = a[0] / det;
    (p, 1.96 * var_p.sqrt(), c)
}

/// Weak error `E Φ(μ^N_T) − reference` for each `N`, with `reps` independent
/// replications and a fitted rate.
pub fn chaos_experiment(
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    mu0: &GridMeasure,
    cfg: &ChaosConfig,
    reference: f64,
    time_step_shift: f64,
) -> Result<ChaosReport> {
    if cfg.reps < 2 {
        return Err(Error::Parameter("at least two replications are needed".into()));
    }
    if cfg.ns.len() < 2 {
        return Err(Error::Parameter("at least two particle counts are needed".into()));
    }
    let mut rows = Vec::new();
    let mut replications = Vec::new();
    for &n in &cfg.ns {
        let vals = replicate(model, phi, mu0, n, cfg.reps, cfg.t, cfg.dt, cfg.seed)?;
        let (mean, se) = mean_and_stderr(&vals);
        if !mean.is_finite() || !se.is_finite() {
            return Err(Error::NonFinite(format!("Monte Carlo statistics at N = {n}")));
        }
        rows.push(ChaosRow {
            n,
            mean_error: mean - reference,
            stderr: se,
            reps: cfg.reps,
        });
        replications.push(vals);
    }
    let (slope, half_width, constant) = fit_rate(&rows);
    Ok(ChaosReport {
        rows,
        slope,
        half_width,
        constant,
        reference,
        time_step_shift,
        replications,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{decoupled_drift, kuramoto, linear_functional};
    use crate::torus::GridFunction;
    use std::f64::consts::PI;

    fn grid(m: usize) -> Grid {
        Grid::new(m).unwrap()
    }

    #[test]
    fn inverse_cdf_reproduces_moments() {
        let g = grid(64);
        let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
        let s = InverseCdf::new(&mu);
        let n = 20000;
        let c: f64 = (0..n)
            .map(|i| (2.0 * PI * s.sample((i as f64 + 0.5) / n as f64)).cos())
            .sum::<f64>()
            / n as f64;
        // the interpolant's first mode is 0.25 up to O(dx²)
        assert!((c - 0.25).abs() < 2e-3, "{c}");
        for u in [0.0, 0.3, 0.999999] {
            let x = s.sample(u);
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn brownian_particles_match_heat_kernel() {
        let g = grid(64);
        let b = decoupled_drift(g, vec![0.0; 64]).unwrap();
        let mu = GridMeasure::discrete_dirac(g, 0);
        let t = 0.02;
        let e = simulate_particles(&b, &GridMeasure::uniform(g), 4, t, 0.005, 3).unwrap();
        assert_eq!(e.positions.len(), 4);
        // start near 0 via a concentrated density; E cos 2πY = e^{-(2π)² T}·(first mode of start)
        let start = InverseCdf::new(&mu);
        let n = 20000;
        let e = simulate_particles(&b, &mu, n, t, 0.005, 11).unwrap();
        let emp: f64 = e.positions.iter().map(|y| (2.0 * PI * y).cos()).sum::<f64>() / n as f64;
        let m0: f64 = (0..4000)
            .map(|i| (2.0 * PI * start.sample((i as f64 + 0.5) / 4000.0)).cos())
            .sum::<f64>()
            / 4000.0;
        let expect = m0 * (-(2.0 * PI).powi(2) * t).exp();
        let sd = (0.5 / n as f64).sqrt();
        assert!((emp - expect).abs() < 3.0 * sd, "{emp} vs {expect}");
    }

    #[test]
    fn same_seed_same_trajectory() {
        let g = grid(32);
        let b = kuramoto(g, 4.0).unwrap();
        let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
        let a = simulate_particles(&b, &mu, 50, 0.05, 0.01, 9).unwrap();
        let c = simulate_particles(&b, &mu, 50, 0.05, 0.01, 9).unwrap();
        let d = simulate_particles(&b, &mu, 50, 0.05, 0.01, 10).unwrap();
        assert_eq!(a, c);
        assert_ne!(a.positions, d.positions);
    }

    #[test]
    fn kuramoto_from_uniform_keeps_zero_moment() {
        let g = grid(32);
        let b = kuramoto(g, 2.0).unwrap();
        let phi = linear_functional(&GridFunction::from_fn(g, |x| (2.0 * PI * x).cos()).unwrap());
        let vals = replicate(&b, &phi, &GridMeasure::uniform(g), 100, 200, 0.1, 0.01, 5).unwrap();
        let (mean, se) = mean_and_stderr(&vals);
        assert!(mean.abs() < 4.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn single_particle_runs() {
        let g = grid(16);
        let b = kuramoto(g, 1.0).unwrap();
        let e = simulate_particles(&b, &GridMeasure::uniform(g), 1, 0.01, 0.001, 0).unwrap();
        assert_eq!(e.n, 1);
    }

    #[test]
    fn decoupled_weak_error_is_noise() {
        let g = grid(64);
        let b = decoupled_drift(g, g.sample(|x| 0.7 * (2.0 * PI * x).sin())).unwrap();
        let phi = linear_functional(&GridFunction::from_fn(g, |x| (2.0 * PI * x).cos()).unwrap());
        let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
        let (t, dt) = (0.05, 0.005);
        // the time-discrete limit carries the same Euler bias as the particles
        let reference = discrete_mv_reference(&b, &phi, &mu, t, dt, 512).unwrap();
        let vals = replicate(&b, &phi, &mu, 100, 400, t, dt, 17).unwrap();
        let (mean, se) = mean_and_stderr(&vals);
        assert!((mean - reference).abs() < 3.5 * se, "{mean} ± {se} vs {reference}");
    }

    #[test]
    fn discrete_limit_converges_to_pde() {
        // the same grid for both, so that both start from the same nodal law
        let g = grid(512);
        let b = kuramoto(g, 5.0).unwrap();
        let phi = linear_functional(&GridFunction::from_fn(g, |x| (2.0 * PI * x).cos()).unwrap());
        let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
        let t = 0.05;
        let pde = pde_reference(&b, &phi, &mu, t, &SolveConfig::with_dt(1e-5)).unwrap();
        let errs: Vec<f64> = [2e-3, 1e-3, 5e-4]
            .iter()
            .map(|&dt| (discrete_mv_reference(&b, &phi, &mu, t, dt, 512).unwrap() - pde).abs())
            .collect();
        // first order in dt
        for w in errs.windows(2) {
            assert!((w[0] / w[1] - 2.0).abs() < 0.3, "{errs:?}");
        }
    }

    #[test]
    fn rate_fit_recovers_exact_power() {
        let rows: Vec<ChaosRow> = [50, 100, 200, 400]
            .iter()
            .map(|&n| ChaosRow {
                n,
                mean_error: -3.0 / n as f64,
                stderr: 1e-3,
                reps: 10,
            })
            .collect();
        let (slope, hw, c) = fit_rate(&rows);
        assert!((slope + 1.0).abs() < 1e-12);
        assert!(hw > 0.0);
        assert!((c + 3.0).abs() < 1e-12);
    }

    #[test]
    fn rate_fit_is_unbiased_at_low_signal() {
        // e_N = c/N + noise with signal/noise 1.8 at the largest N
        let ns = [50usize, 100, 200, 400, 800, 1600];
        let (c, a, reps) = (-6.0, 1.65, 400.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 400;
        let mut slopes = Vec::new();
        for _ in 0..trials {
            let rows: Vec<ChaosRow> = ns
                .iter()
                .map(|&n| {
                    let se = a / (n as f64 * reps).sqrt();
                    let z: f64 = rng.sample(StandardNormal);
                    ChaosRow { n, mean_error: c / n as f64 + se * z, stderr: se, reps: 400 }
                })
                .collect();
            slopes.push(fit_rate(&rows).0);
        }
        let (mean, se) = mean_and_stderr(&slopes);
        assert!((mean + 1.0).abs() < 0.02 + 3.0 * se, "{mean} ± {se}");
    }
}

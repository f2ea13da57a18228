//! Forward solvers: the nonlinear Fokker–Planck equation
//! `∂_t m + div(b(·, m) m) − Δm = 0` and its linearizations
//! `∂_t q + div(b(·, m) q) + div(m δb/δm(·, m)(q)) − Δq = F`.
//!
//! Diffusion is θ-implicit, both divergence terms are explicit central
//! differences in conservative form, and the drift is frozen at the start of
//! each step. The linearized step is the exact derivative of the nonlinear
//! step, so first- and second-order remainders are clean at the discrete level.

use crate::error::{Error, Result};
use crate::hierarchy::{Convention, Hierarchy};
use crate::models::DriftModel;
use crate::scheme::ThetaScheme;
use crate::torus::{divergence_into, integrate, sup_norm, Grid, GridMeasure, SignedGridField};

/// Clipping threshold for round-off undershoots of the density.
pub const NEGATIVITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub dt: f64,
    pub theta: f64,
    pub cfl_safety: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            theta: 0.5,
            cfl_safety: 0.9,
        }
    }
}

impl SolveConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Parameter(format!("dt = {} must be positive", self.dt)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Parameter(format!("theta = {} outside [0, 1]", self.theta)));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return Err(Error::Parameter(format!(
                "cfl_safety = {} outside (0, 1)",
                self.cfl_safety
            )));
        }
        Ok(())
    }

    /// Number of steps covering `[0, t]`; the step is shrunk to land on `t`.
    pub fn steps_for(&self, t: f64) -> Result<(usize, f64)> {
        self.validate()?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::TimeRange(format!("final time {t} must be non-negative")));
        }
        let steps = (t / self.dt - 1e-9).ceil().max(0.0) as usize;
        let dt = if steps == 0 { self.dt } else { t / steps as f64 };
        Ok((steps, dt))
    }
}

/// Snapshots `m(t_n, μ)`, with the drift `b(·, m(t_n))` used by each step.
#[derive(Debug, Clone)]
pub struct MeasurePath {
    grid: Grid,
    dt: f64,
    theta: f64,
    snapshots: Vec<Vec<f64>>,
    drifts: Vec<Vec<f64>>,
}

impl MeasurePath {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn final_time(&self) -> f64 {
        self.dt * self.steps() as f64
    }

    pub fn snapshot(&self, n: usize) -> &[f64] {
        &self.snapshots[n]
    }

    /// `b(·, m(t_n))`.
    pub fn drift(&self, n: usize) -> &[f64] {
        &self.drifts[n]
    }

    pub fn measure(&self, n: usize) -> GridMeasure {
        GridMeasure::from_raw(self.grid, self.snapshots[n].clone())
    }

    pub fn final_measure(&self) -> GridMeasure {
        self.measure(self.steps())
    }

    pub(crate) fn scheme(&self) -> ThetaScheme {
        ThetaScheme::new(self.grid.len(), self.grid.dx(), self.dt, self.theta)
    }
}

/// Snapshots of a signed solution of a linearized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedPath {
    grid: Grid,
    dt: f64,
    snapshots: Vec<Vec<f64>>,
}

impl SignedPath {
    pub(crate) fn from_snapshots(grid: Grid, dt: f64, snapshots: Vec<Vec<f64>>) -> Self {
        Self {
            grid,
            dt,
            snapshots,
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn snapshot(&self, n: usize) -> &[f64] {
        &self.snapshots[n]
    }

    pub fn field(&self, n: usize) -> SignedGridField {
        SignedGridField::new(self.grid, self.snapshots[n].clone())
    }

    pub fn final_field(&self) -> SignedGridField {
        self.field(self.steps())
    }

    /// Largest `|Σ q(t_n) dx|` over the path.
    pub fn max_total_integral(&self) -> f64 {
        self.snapshots
            .iter()
            .map(|s| integrate(s, self.grid.dx()).abs())
            .fold(0.0, f64::max)
    }

    /// CSV `t,x,value`.
    pub fn to_csv(&self) -> String {
        path_csv("t", self.grid, self.dt, &self.snapshots)
    }
}

pub(crate) fn path_csv(time_label: &str, grid: Grid, dt: f64, snapshots: &[Vec<f64>]) -> String {
    use crate::torus::fmt_float;
    use std::fmt::Write as _;
    let mut out = format!("{time_label},x,value\n");
    for (n, snap) in snapshots.iter().enumerate() {
        let t = fmt_float(n as f64 * dt);
        for (x, v) in grid.nodes().zip(snap) {
            let _ = writeln!(out, "{t},{},{}", fmt_float(x), fmt_float(*v));
        }
    }
    out
}

impl MeasurePath {
    pub fn to_csv(&self) -> String {
        path_csv("t", self.grid, self.dt, &self.snapshots)
    }
}

fn check_cfl(step: usize, drift: &[f64], dt: f64, dx: f64, safety: f64) -> Result<()> {
    let bmax = sup_norm(drift);
    if bmax > 0.0 && dt * bmax > safety * dx {
        return Err(Error::Cfl {
            step,
            dt,
            limit: safety * dx / bmax,
        });
    }
    Ok(())
}

/// Integrates the nonlinear equation from `mu0` up to time `t`.
pub fn solve_fp(
    model: &dyn DriftModel,
    mu0: &GridMeasure,
    t: f64,
    cfg: &SolveConfig,
) -> Result<MeasurePath> {
    let grid = model.grid();
    grid.check(&mu0.grid())?;
    let (steps, dt) = cfg.steps_for(t)?;
    let m = grid.len();
    let dx = grid.dx();
    let mut scheme = ThetaScheme::new(m, dx, dt, cfg.theta);
    let mut snapshots = Vec::with_capacity(steps + 1);
    let mut drifts = Vec::with_capacity(steps + 1);
    let mut cur = mu0.values().to_vec();
    let mut flux = vec![0.0; m];
    let mut div = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for n in 0..=steps {
        let mut b = vec![0.0; m];
        model.drift(&cur, &mut b);
        if n < steps {
            check_cfl(n, &b, dt, dx, cfg.cfl_safety)?;
            for ((f, bj), mj) in flux.iter_mut().zip(&b).zip(&cur) {
                *f = bj * mj;
            }
            divergence_into(&flux, dx, &mut div);
            scheme.explicit_part(&cur, &mut rhs);
            for (r, d) in rhs.iter_mut().zip(&div) {
                *r -= dt * d;
            }
            scheme.implicit_solve(&mut rhs);
            enforce_density(&mut rhs, n + 1, dx)?;
        }
        snapshots.push(std::mem::replace(&mut cur, rhs.clone()));
        drifts.push(b);
    }
    Ok(MeasurePath {
        grid,
        dt,
        theta: cfg.theta,
        snapshots,
        drifts,
    })
}

fn enforce_density(values: &mut [f64], step: usize, dx: f64) -> Result<()> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::NonFinite(format!("density at step {step}")));
    }
    if min < -NEGATIVITY_TOL {
        return Err(Error::NegativeDensity { step, value: min });
    }
    if min < 0.0 {
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        let mass = integrate(values, dx);
        values.iter_mut().for_each(|v| *v /= mass);
    }
    Ok(())
}

/// Integrates a linearized forward problem along `base` from `init`;
/// `source(n, out)` writes `F(t_n)` (explicit). Returns every snapshot when
/// `keep_path`, otherwise only the initial and final ones.
pub(crate) fn solve_linear_forward(
    model: &dyn DriftModel,
    base: &MeasurePath,
    init: Vec<f64>,
    mut source: impl FnMut(usize, &mut [f64]) -> Result<bool>,
    keep_path: bool,
) -> Result<SignedPath> {
    let grid = base.grid();
    let m = grid.len();
    let dx = grid.dx();
    let dt = base.dt();
    let steps = base.steps();
    let mut scheme = base.scheme();
    let coupled = model.measure_dependent();
    let mut snapshots = Vec::with_capacity(if keep_path { steps + 1 } else { 2 });
    let mut cur = init;
    let mut flux = vec![0.0; m];
    let mut db = vec![0.0; m];
    let mut div = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    let mut src = vec![0.0; m];
    snapshots.push(cur.clone());
    for n in 0..steps {
        let mn = base.snapshot(n);
        let bn = base.drift(n);
        if coupled {
            model.deriv(mn, &[&cur], &mut db);
        }
        for j in 0..m {
            flux[j] = bn[j] * cur[j] + if coupled { mn[j] * db[j] } else { 0.0 };
        }
        divergence_into(&flux, dx, &mut div);
        scheme.explicit_part(&cur, &mut rhs);
        let has_source = source(n, &mut src)?;
        for j in 0..m {
            rhs[j] -= dt * div[j];
            if has_source {
                rhs[j] += dt * src[j];
            }
        }
        scheme.implicit_solve(&mut rhs);
        if keep_path {
            snapshots.push(rhs.clone());
        }
        std::mem::swap(&mut cur, &mut rhs);
    }
    if !keep_path && steps > 0 {
        snapshots.push(cur);
    }
    if snapshots.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linearized forward solution".into()));
    }
    let mut path = SignedPath::from_snapshots(grid, dt, snapshots);
    if !keep_path {
        // two snapshots standing for t = 0 and t = T
        path.dt = dt * steps as f64;
    }
    Ok(path)
}

/// First linearization with initial datum `μ̂ − μ`.
pub fn solve_m1(
    model: &dyn DriftModel,
    base: &MeasurePath,
    mu_hat: &GridMeasure,
    _cfg: &SolveConfig,
) -> Result<SignedPath> {
    let init = mu_hat.minus(&base.measure(0))?.into_values();
    solve_linear_forward(model, base, init, |_, _| Ok(false), true)
}

/// `m^(k)(·, μ, μ_1, …, μ_k)` on `[0, t]` under the given initial-datum convention.
pub fn solve_mk(
    k: usize,
    model: &dyn DriftModel,
    mu: &GridMeasure,
    args: &[GridMeasure],
    t: f64,
    cfg: &SolveConfig,
    convention: Convention,
) -> Result<SignedPath> {
    if k == 0 || args.len() != k {
        return Err(Error::Parameter(format!(
            "order {k} needs exactly {k} argument measures, got {}",
            args.len()
        )));
    }
    let base = solve_fp(model, mu, t, cfg)?;
    let mut h = Hierarchy::new(model, &base, convention);
    let slots: Vec<usize> = args
        .iter()
        .map(|a| h.add_argument(a))
        .collect::<Result<_>>()?;
    h.ensure_forward(&slots)?;
    Ok(h.forward_path(&slots)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{decoupled_drift, kuramoto};
    use crate::torus::{GridFunction, SignedGridField};
    use std::f64::consts::PI;

    fn grid(m: usize) -> Grid {
        Grid::new(m).unwrap()
    }

    fn first_mode(grid: Grid, v: &[f64]) -> f64 {
        let f = GridFunction::from_fn(grid, |x| (2.0 * PI * x).cos()).unwrap();
        SignedGridField::new(grid, v.to_vec()).pair(&f).unwrap() * 2.0
    }

    #[test]
    fn constant_drift_keeps_uniform() {
        let g = grid(32);
        let b = decoupled_drift(g, vec![0.7; 32]).unwrap();
        let path = solve_fp(&b, &GridMeasure::uniform(g), 0.1, &SolveConfig::with_dt(1e-3)).unwrap();
        for n in 0..=path.steps() {
            assert!(path.snapshot(n).iter().all(|v| (v - 1.0).abs() < 1e-13));
        }
    }

    #[test]
    fn kuramoto_keeps_uniform_stationary() {
        let g = grid(64);
        let b = kuramoto(g, 5.0).unwrap();
        let path = solve_fp(&b, &GridMeasure::uniform(g), 0.05, &SolveConfig::with_dt(1e-3)).unwrap();
        assert!(path.final_measure().values().iter().all(|v| (v - 1.0).abs() < 1e-13));
    }

    #[test]
    fn heat_mode_decay_is_second_order() {
        let mut errs = Vec::new();
        for m in [32, 64, 128] {
            let g = grid(m);
            let b = decoupled_drift(g, vec![0.0; m]).unwrap();
            let mu0 = GridMeasure::from_fn(g, |x| 1.0 + (2.0 * PI * x).cos()).unwrap();
            let t = 0.01;
            let path = solve_fp(&b, &mu0, t, &SolveConfig::with_dt(1e-6)).unwrap();
            let amp = first_mode(g, path.final_measure().values());
            let exact = (-(2.0 * PI).powi(2) * t).exp();
            errs.push((amp - exact).abs());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() < 0.6, "ratio {ratio}, errs {errs:?}");
        }
    }

    #[test]
    fn mass_is_conserved() {
        let g = grid(64);
        let b = kuramoto(g, 20.0).unwrap();
        let mu0 = GridMeasure::from_fn(g, |x| 1.0 + 0.8 * (2.0 * PI * x).sin()).unwrap();
        let path = solve_fp(&b, &mu0, 0.2, &SolveConfig::with_dt(1e-3)).unwrap();
        for n in 0..=path.steps() {
            assert!((integrate(path.snapshot(n), g.dx()) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn cfl_violation_is_reported() {
        let g = grid(64);
        let b = decoupled_drift(g, vec![100.0; 64]).unwrap();
        let err = solve_fp(&b, &GridMeasure::uniform(g), 0.1, &SolveConfig::with_dt(1e-2)).unwrap_err();
        assert!(matches!(err, Error::Cfl { step: 0, .. }));
    }

    #[test]
    fn m1_with_equal_measures_vanishes() {
        let g = grid(32);
        let b = kuramoto(g, 3.0).unwrap();
        let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
        let cfg = SolveConfig::with_dt(1e-3);
        let base = solve_fp(&b, &mu, 0.05, &cfg).unwrap();
        let m1 = solve_m1(&b, &base, &mu, &cfg).unwrap();
        assert!(m1.final_field().sup_norm() == 0.0);
    }

    #[test]
    fn m1_is_linear_in_perturbation() {
        let g = grid(32);
        let b = kuramoto(g, 3.0).unwrap();
        let mu = GridMeasure::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
        let mu_hat = GridMeasure::from_fn(g, |x| 1.0 + 0.9 * (2.0 * PI * x).sin()).unwrap();
        let cfg = SolveConfig::with_dt(1e-3);
        let base = solve_fp(&b, &mu, 0.05, &cfg).unwrap();
        let full = solve_m1(&b, &base, &mu_hat, &cfg).unwrap();
        let eps = 0.3;
        let half = solve_m1(&b, &base, &mu.mix(&mu_hat, eps).unwrap(), &cfg).unwrap();
        for (a, c) in full.final_field().values().iter().zip(half.final_field().values()) {
            assert!((eps * a - c).abs() < 1e-14);
        }
        assert!(full.max_total_integral() < 1e-14);
    }

    #[test]
    fn steps_land_on_final_time() {
        let cfg = SolveConfig::with_dt(0.03);
        let (steps, dt) = cfg.steps_for(0.1).unwrap();
        assert_eq!(steps, 4);
        assert!((dt * steps as f64 - 0.1).abs() < 1e-15);
        assert_eq!(cfg.steps_for(0.0).unwrap().0, 0);
    }
}

//! Backward solvers along a frozen flow `m(·, μ)`:
//! `∂_s v + b(x, m(s))·∇v + Δv = 0`, `v(t) = ξ`, and the linearized family
//! with zero terminal data and explicit sources.
//!
//! The step `v^n = A^{-1}(B v^{n+1} + dt b^n·∇v^{n+1} + dt S^n)` applies the
//! implicit solve last. The exact adjoint of the forward step would apply it
//! first; the difference is an O(dt) commutator, so forward/backward
//! identities hold to discretization accuracy rather than to round-off.

use crate::error::{Error, Result};
use crate::forward::{path_csv, MeasurePath, SignedPath};
use crate::hierarchy::{Convention, Hierarchy};
use crate::models::DriftModel;
use crate::torus::{gradient_into, Grid, GridFunction, GridMeasure};

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalData {
    pub xi: GridFunction,
    pub t: f64,
}

/// Snapshots `v(s_n, ·)` for `s_n = n dt`, stored in increasing time.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPath {
    grid: Grid,
    dt: f64,
    snapshots: Vec<Vec<f64>>,
}

impl BackwardPath {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn terminal_time(&self) -> f64 {
        self.dt * self.steps() as f64
    }

    pub fn snapshot(&self, n: usize) -> &[f64] {
        &self.snapshots[n]
    }

    /// `v(0, ·)`.
    pub fn initial(&self) -> GridFunction {
        GridFunction::from_raw(self.grid, self.snapshots[0].clone())
    }

    /// CSV `s,x,value`.
    pub fn to_csv(&self) -> String {
        path_csv("s", self.grid, self.dt, &self.snapshots)
    }
}

fn check_horizon(base: &MeasurePath, t: f64) -> Result<()> {
    let tb = base.final_time();
    if (tb - t).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(Error::TimeRange(format!(
            "base path ends at {tb}, terminal time is {t}"
        )));
    }
    Ok(())
}

/// Integrates backward from `terminal`; `source(n, out)` writes `S(s_n)`.
pub(crate) fn solve_linear_backward(
    base: &MeasurePath,
    terminal: Vec<f64>,
    mut source: impl FnMut(usize, &[f64], &mut [f64]) -> Result<bool>,
) -> Result<BackwardPath> {
    let grid = base.grid();
    let m = grid.len();
    let dx = grid.dx();
    let dt = base.dt();
    let steps = base.steps();
    let mut scheme = base.scheme();
    let mut snapshots = vec![Vec::new(); steps + 1];
    let mut grad = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    let mut src = vec![0.0; m];
    snapshots[steps] = terminal;
    for n in (0..steps).rev() {
        let next = &snapshots[n + 1];
        gradient_into(next, dx, &mut grad);
        scheme.explicit_part(next, &mut rhs);
        let has_source = source(n, next, &mut src)?;
        let bn = base.drift(n);
        for j in 0..m {
            rhs[j] += dt * bn[j] * grad[j];
            if has_source {
                rhs[j] += dt * src[j];
            }
        }
        scheme.implicit_solve(&mut rhs);
        snapshots[n] = rhs.clone();
    }
    if snapshots.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("backward solution".into()));
    }
    Ok(BackwardPath {
        grid,
        dt,
        snapshots,
    })
}

/// `v(s, x, μ; ξ, t)`.
pub fn solve_v(
    model: &dyn DriftModel,
    base: &MeasurePath,
    term: &TerminalData,
) -> Result<BackwardPath> {
    let grid = model.grid();
    grid.check(&base.grid())?;
    grid.check(&term.xi.grid())?;
    check_horizon(base, term.t)?;
    solve_linear_backward(base, term.xi.values().to_vec(), |_, _, _| Ok(false))
}

/// First linearization: source `δb/δm(x, m(s))(m^(1)(s))·∇v(s, x)`, zero terminal data.
pub fn solve_v1(
    model: &dyn DriftModel,
    base: &MeasurePath,
    m1: &SignedPath,
    v_path: &BackwardPath,
) -> Result<BackwardPath> {
    let grid = base.grid();
    if m1.steps() != base.steps() || v_path.steps() != base.steps() {
        return Err(Error::TimeRange("paths cover different step counts".into()));
    }
    let m = grid.len();
    let dx = grid.dx();
    let mut db = vec![0.0; m];
    let mut gv = vec![0.0; m];
    let coupled = model.measure_dependent();
    solve_linear_backward(base, vec![0.0; m], |n, _, out| {
        if !coupled {
            return Ok(false);
        }
        model.deriv(base.snapshot(n), &[m1.snapshot(n)], &mut db);
        gradient_into(v_path.snapshot(n + 1), dx, &mut gv);
        for j in 0..m {
            out[j] = db[j] * gv[j];
        }
        Ok(true)
    })
}

/// `v^(k)(·, μ, μ_1, …, μ_k; ξ, t)` with all lower-order solutions built recursively.
pub fn solve_vk(
    k: usize,
    model: &dyn DriftModel,
    mu: &GridMeasure,
    args: &[GridMeasure],
    term: &TerminalData,
    cfg: &crate::forward::SolveConfig,
    convention: Convention,
) -> Result<BackwardPath> {
    if k == 0 || args.len() != k {
        return Err(Error::Parameter(format!(
            "order {k} needs exactly {k} argument measures, got {}",
            args.len()
        )));
    }
    let base = crate::forward::solve_fp(model, mu, term.t, cfg)?;
    let v = solve_v(model, &base, term)?;
    let mut h = Hierarchy::new(model, &base, convention).with_backward(&v);
    let slots: Vec<usize> = args
        .iter()
        .map(|a| h.add_argument(a))
        .collect::<Result<_>>()?;
    h.ensure_backward(&slots)?;
    Ok(h.backward_path(&slots)?.clone())
}

//! Shared θ-scheme machinery: `(I − θ dt Δ) u^{new} = (I + (1−θ) dt Δ) u + dt · explicit`.

use crate::torus::laplacian_into;

/// Constant-coefficient periodic tridiagonal solve by Sherman–Morrison
/// around a Thomas factorization.
#[derive(Debug, Clone)]
struct CyclicTridiag {
    off: f64,
    denom: Vec<f64>,
    cprime: Vec<f64>,
    z: Vec<f64>,
    v_last: f64,
    vz_plus_one: f64,
}

impl CyclicTridiag {
    fn new(n: usize, diag: f64, off: f64) -> Self {
        let gamma = -diag;
        let mut b = vec![diag; n];
        b[0] = diag - gamma;
        b[n - 1] = diag - off * off / gamma;
        let mut denom = vec![0.0; n];
        let mut cprime = vec![0.0; n];
        denom[0] = b[0];
        cprime[0] = off / b[0];
        for i in 1..n {
            denom[i] = b[i] - off * cprime[i - 1];
            cprime[i] = off / denom[i];
        }
        let mut solver = Self {
            off,
            denom,
            cprime,
            z: Vec::new(),
            v_last: off / gamma,
            vz_plus_one: 0.0,
        };
        let mut u = vec![0.0; n];
        u[0] = gamma;
        u[n - 1] = off;
        solver.thomas(&mut u);
        solver.vz_plus_one = 1.0 + u[0] + solver.v_last * u[n - 1];
        solver.z = u;
        solver
    }

    fn thomas(&self, d: &mut [f64]) {
        let n = d.len();
        d[0] /= self.denom[0];
        for i in 1..n {
            d[i] = (d[i] - self.off * d[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            d[i] -= self.cprime[i] * d[i + 1];
        }
    }

    fn solve(&self, d: &mut [f64]) {
        self.thomas(d);
        let n = d.len();
        let factor = (d[0] + self.v_last * d[n - 1]) / self.vz_plus_one;
        for (x, z) in d.iter_mut().zip(&self.z) {
            *x -= factor * z;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ThetaScheme {
    pub dt: f64,
    pub dx: f64,
    theta: f64,
    implicit: Option<CyclicTridiag>,
    lap: Vec<f64>,
}

impl ThetaScheme {
    pub fn new(m: usize, dx: f64, dt: f64, theta: f64) -> Self {
        let r = theta * dt / (dx * dx);
        let implicit = (theta > 0.0).then(|| CyclicTridiag::new(m, 1.0 + 2.0 * r, -r));
        Self {
            dt,
            dx,
            theta,
            implicit,
            lap: vec![0.0; m],
        }
    }

    /// `out = u + (1−θ) dt Δu`.
    pub fn explicit_part(&mut self, u: &[f64], out: &mut [f64]) {
        laplacian_into(u, self.dx, &mut self.lap);
        let w = (1.0 - self.theta) * self.dt;
        for ((o, x), l) in out.iter_mut().zip(u).zip(&self.lap) {
            *o = x + w * l;
        }
    }

    /// In place `rhs ← (I − θ dt Δ)^{-1} rhs`.
    pub fn implicit_solve(&self, rhs: &mut [f64]) {
        if let Some(s) = &self.implicit {
            s.solve(rhs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_solve_inverts_operator() {
        for n in [8, 13, 64] {
            let (diag, off) = (3.2, -1.1);
            let s = CyclicTridiag::new(n, diag, off);
            let x: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + i as f64 * 0.01).collect();
            let mut d: Vec<f64> = (0..n)
                .map(|i| diag * x[i] + off * (x[(i + 1) % n] + x[(i + n - 1) % n]))
                .collect();
            s.solve(&mut d);
            for (a, b) in d.iter().zip(&x) {
                assert!((a - b).abs() < 1e-13, "n={n}");
            }
        }
    }
}

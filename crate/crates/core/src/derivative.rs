//! Linear functional derivatives of `U(t, μ) = Φ(m(t, μ))`.
//!
//! The forward route sums, over every set partition of the slots, the
//! derivative of `Φ` at `m(t, μ)` paired with hierarchy solutions whose
//! arguments are mollified Diracs. The backward route uses `v`, `v^(1)` and
//! the `I`-chain. Finite-difference oracles run the nonlinear solver only.

use rayon::prelude::*;

use crate::backward::{solve_v, solve_v1, BackwardPath, TerminalData};
use crate::error::{Error, Result};
use crate::forward::{solve_fp, solve_linear_forward, MeasurePath, SolveConfig};
use crate::hierarchy::{Convention, Hierarchy};
use crate::models::{DriftModel, TestFunctional};
use crate::multiindex::capital_lambda_seq;
use crate::stats::loglog_fit;
use crate::torus::{
    dot, dual_sup_norm, fmt_float, mollified_dirac, wasserstein1, Grid, GridFunction, GridMeasure,
    KernelBandwidth, SignedGridField,
};

/// Mollification used for the Dirac arguments of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidth {
    /// A single bandwidth `h`.
    Fixed(f64),
    /// Repeated Richardson extrapolation `h → 0` from these bandwidths.
    Extrapolated(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOptions {
    /// Keep every `stride`-th node in each `z` slot.
    pub stride: usize,
    /// Bandwidths in grid cells, each half the previous one.
    pub cells: Vec<f64>,
    pub convention: Convention,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            stride: 4,
            cells: vec![8.0, 4.0, 2.0],
            convention: Convention::Centered,
        }
    }
}

impl KernelOptions {
    pub fn full_grid() -> Self {
        Self {
            stride: 1,
            ..Self::default()
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn fixed(mut self, cells: f64) -> Self {
        self.cells = vec![cells];
        self
    }

    fn validate(&self, grid: Grid) -> Result<()> {
        if self.stride == 0 || !grid.len().is_multiple_of(self.stride) {
            return Err(Error::Parameter(format!(
                "lattice stride {} must divide M = {}",
                self.stride,
                grid.len()
            )));
        }
        if self.cells.is_empty() {
            return Err(Error::Parameter("no bandwidth given".into()));
        }
        for w in self.cells.windows(2) {
            if (w[0] - 2.0 * w[1]).abs() > 1e-12 * w[0] {
                return Err(Error::Parameter(
                    "extrapolation bandwidths must halve at each level".into(),
                ));
            }
        }
        for &c in &self.cells {
            KernelBandwidth::cells(c, grid)?;
        }
        Ok(())
    }
}

/// `δ^kU/δm^k(t, μ)(z_1, …, z_k)` on a lattice of grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeKernel {
    k: usize,
    t: f64,
    mu: GridMeasure,
    nodes: Vec<usize>,
    values: Vec<f64>,
    bandwidth: Bandwidth,
    convention: Convention,
}

impl DerivativeKernel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn mu(&self) -> &GridMeasure {
        &self.mu
    }

    pub fn grid(&self) -> Grid {
        self.mu.grid()
    }

    /// Grid-node indices of the lattice, shared by all slots.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Row-major over lattice positions, slot 1 slowest.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bandwidth
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    fn flat(&self, pos: &[usize]) -> usize {
        pos.iter().fold(0, |acc, &p| acc * self.nodes.len() + p)
    }

    /// Value at lattice positions (not grid indices).
    pub fn get(&self, pos: &[usize]) -> f64 {
        self.values[self.flat(pos)]
    }

    /// Value at grid nodes, if they all lie on the lattice.
    pub fn at_nodes(&self, nodes: &[usize]) -> Option<f64> {
        let pos: Option<Vec<usize>> = nodes
            .iter()
            .map(|j| self.nodes.iter().position(|n| n == j))
            .collect();
        pos.map(|p| self.get(&p))
    }

    /// The `k = 1` kernel on the full grid.
    pub fn to_grid_function(&self) -> Result<GridFunction> {
        if self.k != 1 || self.nodes.len() != self.grid().len() {
            return Err(Error::Unsupported(
                "only first-order kernels on the full grid are grid functions".into(),
            ));
        }
        GridFunction::new(self.grid(), self.values.clone())
    }

    /// Lattice quadrature weight of one node.
    fn weight(&self) -> f64 {
        self.grid().dx() * (self.grid().len() / self.nodes.len()) as f64
    }

    /// `max_i max_{other slots} |∫ kernel μ(dz_i)|`.
    pub fn normalization_residual(&self) -> f64 {
        let l = self.nodes.len();
        let w = self.weight();
        let mu = self.mu.values();
        let mut worst: f64 = 0.0;
        for slot in 0..self.k {
            let stride = l.pow((self.k - 1 - slot) as u32);
            for base in 0..self.values.len() {
                if !(base / stride).is_multiple_of(l) {
                    continue;
                }
                let s: f64 = (0..l)
                    .map(|p| self.values[base + p * stride] * mu[self.nodes[p]])
                    .sum();
                worst = worst.max((s * w).abs());
            }
        }
        worst
    }

    /// `max |K(…, z_i, …, z_j, …) − K(…, z_j, …, z_i, …)|` over all slot pairs.
    pub fn asymmetry(&self) -> f64 {
        let l = self.nodes.len();
        let mut worst: f64 = 0.0;
        let mut pos = vec![0; self.k];
        for idx in 0..self.values.len() {
            let mut r = idx;
            for p in pos.iter_mut().rev() {
                *p = r % l;
                r /= l;
            }
            for i in 0..self.k {
                for j in i + 1..self.k {
                    let mut swapped = pos.clone();
                    swapped.swap(i, j);
                    worst = worst.max((self.values[idx] - self.get(&swapped)).abs());
                }
            }
        }
        worst
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// `sup |self − other|`; both kernels must share the lattice.
    pub fn max_abs_diff(&self, other: &DerivativeKernel) -> Result<f64> {
        if self.nodes != other.nodes || self.k != other.k {
            return Err(Error::Parameter("kernels live on different lattices".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs())))
    }

    pub fn shifted(&self, c: f64) -> DerivativeKernel {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v += c);
        out
    }

    /// `∫…∫ K d q_1 … d q_k` by lattice quadrature.
    pub fn pair(&self, args: &[&SignedGridField]) -> Result<f64> {
        if args.len() != self.k {
            return Err(Error::Parameter(format!(
                "order-{} kernel paired with {} fields",
                self.k,
                args.len()
            )));
        }
        let l = self.nodes.len();
        let w = self.weight();
        let mut total = 0.0;
        for (idx, v) in self.values.iter().enumerate() {
            let mut r = idx;
            let mut prod = *v;
            for q in args.iter().rev() {
                prod *= q.values()[self.nodes[r % l]] * w;
                r /= l;
            }
            total += prod;
        }
        Ok(total)
    }

    /// CSV `z1,...,zk,value`.
    pub fn to_csv(&self) -> String {
        let grid = self.grid();
        let header: Vec<String> = (1..=self.k).map(|i| format!("z{i}")).collect();
        let mut out = format!("{},value\n", header.join(","));
        let l = self.nodes.len();
        let mut pos = vec![0; self.k];
        for (idx, v) in self.values.iter().enumerate() {
            let mut r = idx;
            for p in pos.iter_mut().rev() {
                *p = r % l;
                r /= l;
            }
            for p in &pos {
                out.push_str(&fmt_float(grid.node(self.nodes[*p])));
                out.push(',');
            }
            out.push_str(&fmt_float(*v));
            out.push('\n');
        }
        out
    }
}

fn lattice(grid: Grid, stride: usize) -> Vec<usize> {
    (0..grid.len()).step_by(stride).collect()
}

fn tuples(l: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..l).map(move |i| {
                    let mut t = t.clone();
                    t.push(i);
                    t
                })
            })
            .collect();
    }
    out
}

fn dirac_direction(z: f64, cells: f64, mu: &GridMeasure) -> Result<SignedGridField> {
    let grid = mu.grid();
    mollified_dirac(z, KernelBandwidth::cells(cells, grid)?, grid).minus(mu)
}

/// Neville table of Richardson steps in `h²`; levels are coarse to fine.
fn richardson(levels: &[Vec<f64>]) -> Vec<f64> {
    let mut table: Vec<Vec<f64>> = levels.to_vec();
    for j in 1..levels.len() {
        let f = 4f64.powi(j as i32);
        table = table
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(c, fine)| (f * fine - c) / (f - 1.0))
                    .collect()
            })
            .collect();
    }
    table.pop().unwrap_or_default()
}

fn check_phi(k: usize, phi: &dyn TestFunctional, model: &dyn DriftModel) -> Result<()> {
    model.grid().check(&phi.grid())?;
    if k == 0 || phi.max_order() < k {
        return Err(Error::Unsupported(format!(
            "functional '{}' has derivatives up to order {}, order {k} requested",
            phi.name(),
            phi.max_order()
        )));
    }
    Ok(())
}

/// Kernel values at one bandwidth, over all lattice tuples.
fn kernel_values(
    k: usize,
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    base: &MeasurePath,
    nodes: &[usize],
    cells: f64,
    convention: Convention,
) -> Result<Vec<f64>> {
    let grid = base.grid();
    let mu = base.measure(0);
    let mut h = Hierarchy::new(model, base, convention);
    let ids: Vec<usize> = nodes
        .iter()
        .map(|&j| h.add_direction(dirac_direction(grid.node(j), cells, &mu)?))
        .collect::<Result<_>>()?;
    let lower: Vec<Vec<usize>> = (1..k)
        .flat_map(|len| tuples(ids.len(), len))
        .map(|t| t.iter().map(|&p| ids[p]).collect())
        .collect();
    h.ensure_forward_all(&lower)?;
    let partitions: Vec<Vec<Vec<usize>>> = capital_lambda_seq(k)?
        .iter()
        .map(|p| p.alphas().to_vec())
        .collect();
    let m_t = base.snapshot(base.steps());
    let h = &h;
    tuples(ids.len(), k)
        .par_iter()
        .map(|pos| {
            let slots: Vec<usize> = pos.iter().map(|&p| ids[p]).collect();
            let top = h.solve_forward(&slots, false)?.final_field();
            let mut total = 0.0;
            for rows in &partitions {
                let fields: Vec<&[f64]> = rows
                    .iter()
                    .map(|row| {
                        if row.len() == k {
                            return Ok(top.values());
                        }
                        let sub: Vec<usize> = row.iter().map(|a| slots[a - 1]).collect();
                        let path = h.forward_path(&sub)?;
                        Ok(path.snapshot(path.steps()))
                    })
                    .collect::<Result<_>>()?;
                total += phi.pairing(m_t, &fields);
            }
            Ok(total)
        })
        .collect()
}

/// Forward-route kernel of order `k`, Richardson-extrapolated over the
/// bandwidths in `opts` (or at the single bandwidth given).
pub fn assemble_kernel(
    k: usize,
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    t: f64,
    mu: &GridMeasure,
    opts: &KernelOptions,
    cfg: &SolveConfig,
) -> Result<DerivativeKernel> {
    check_phi(k, phi, model)?;
    let grid = model.grid();
    opts.validate(grid)?;
    let base = solve_fp(model, mu, t, cfg)?;
    let nodes = lattice(grid, opts.stride);
    let levels: Vec<Vec<f64>> = opts
        .cells
        .iter()
        .map(|&c| kernel_values(k, model, phi, &base, &nodes, c, opts.convention))
        .collect::<Result<_>>()?;
    let dx = grid.dx();
    let bandwidth = match opts.cells.as_slice() {
        [c] => Bandwidth::Fixed(c * dx),
        cs => Bandwidth::Extrapolated(cs.iter().map(|c| c * dx).collect()),
    };
    let values = richardson(&levels);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("derivative kernel".into()));
    }
    Ok(DerivativeKernel {
        k,
        t: base.final_time(),
        mu: mu.clone(),
        nodes,
        values,
        bandwidth,
        convention: opts.convention,
    })
}

/// `δU/δm(t, μ)(x) = v(0, x) + ∫ δv/δm(0, z, x) μ(dz)` with
/// `ξ = δΦ/δm(m(t, μ))`, Diracs mollified and extrapolated as in `opts`.
pub fn backward_route_first_derivative(
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    t: f64,
    mu: &GridMeasure,
    opts: &KernelOptions,
    cfg: &SolveConfig,
) -> Result<DerivativeKernel> {
    check_phi(1, phi, model)?;
    let grid = model.grid();
    opts.validate(grid)?;
    let base = solve_fp(model, mu, t, cfg)?;
    let xi = GridFunction::new(grid, phi.first_variation(base.snapshot(base.steps())))?;
    let v = solve_v(model, &base, &TerminalData { xi, t: base.final_time() })?;
    let nodes = lattice(grid, opts.stride);
    let dx = grid.dx();
    let v0 = v.snapshot(0);
    let levels: Vec<Vec<f64>> = opts
        .cells
        .iter()
        .map(|&c| {
            nodes
                .par_iter()
                .map(|&j| {
                    let d = dirac_direction(grid.node(j), c, mu)?;
                    let m1 = solve_linear_forward(model, &base, d.values().to_vec(), |_, _| Ok(false), true)?;
                    let v1 = solve_v1(model, &base, &m1, &v)?;
                    // v(0) against the mollified Dirac; d = δ^h − μ
                    let local = dot(v0, d.values()) * dx + dot(v0, mu.values()) * dx;
                    Ok(local + dot(v1.snapshot(0), mu.values()) * dx)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let bandwidth = match opts.cells.as_slice() {
        [c] => Bandwidth::Fixed(c * dx),
        cs => Bandwidth::Extrapolated(cs.iter().map(|c| c * dx).collect()),
    };
    Ok(DerivativeKernel {
        k: 1,
        t: base.final_time(),
        mu: mu.clone(),
        nodes,
        values: richardson(&levels),
        bandwidth,
        convention: opts.convention,
    })
}

/// `x ↦ I^(j)(x)` on the full grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IChainResult {
    pub j: usize,
    pub values: GridFunction,
}

fn node_direction(grid: Grid, j: usize, mu: &GridMeasure) -> SignedGridField {
    let mut e = vec![0.0; grid.len()];
    e[j] = 1.0 / grid.dx();
    SignedGridField::new(grid, e.iter().zip(mu.values()).map(|(a, b)| a - b).collect())
}

fn first_level(
    model: &dyn DriftModel,
    base: &MeasurePath,
    v: &BackwardPath,
) -> Result<Vec<f64>> {
    let grid = base.grid();
    let mu = base.measure(0);
    let dx = grid.dx();
    (0..grid.len())
        .into_par_iter()
        .map(|x| {
            let d = node_direction(grid, x, &mu);
            let m1 = solve_linear_forward(model, base, d.into_values(), |_, _| Ok(false), true)?;
            let v1 = solve_v1(model, base, &m1, v)?;
            Ok(v.snapshot(0)[x] + dot(v1.snapshot(0), mu.values()) * dx)
        })
        .collect()
}

/// The backward chain for `j ∈ {1, 2}`: `I^(1)` pairs with `m^(1)` and
/// `I^(2)` with the iterated `m^(2)(·, δ_{a} − μ, ·)`, where `a` is the single
/// Dirac argument (mollified at `cells` grid cells).
#[allow(clippy::too_many_arguments)]
pub fn i_chain(
    j: usize,
    model: &dyn DriftModel,
    xi: &GridFunction,
    t: f64,
    mu: &GridMeasure,
    dirac_args: &[f64],
    cells: f64,
    cfg: &SolveConfig,
) -> Result<IChainResult> {
    if j == 0 || j > 2 {
        return Err(Error::Unsupported(format!("I-chain level {j} (levels 1 and 2 are implemented)")));
    }
    if dirac_args.len() != j - 1 {
        return Err(Error::Parameter(format!(
            "level {j} takes {} Dirac arguments, got {}",
            j - 1,
            dirac_args.len()
        )));
    }
    let grid = model.grid();
    grid.check(&xi.grid())?;
    let base = solve_fp(model, mu, t, cfg)?;
    let v = solve_v(model, &base, &TerminalData { xi: xi.clone(), t: base.final_time() })?;
    let i1 = first_level(model, &base, &v)?;
    if j == 1 {
        return Ok(IChainResult {
            j,
            values: GridFunction::new(grid, i1)?,
        });
    }
    let dx = grid.dx();
    let d1 = dirac_direction(dirac_args[0], cells, mu)?;
    // the base-point derivative of v^(1)(·, d_1) is the centred v^(2)
    let mut h = Hierarchy::new(model, &base, Convention::Centered).with_backward(&v);
    let a = h.add_direction(d1.clone())?;
    h.ensure_backward(&[a])?;
    let v1a = h.backward_path(&[a])?.snapshot(0).to_vec();
    let t_d = -dot(&v1a, mu.values()) * dx;
    let mut out = vec![0.0; grid.len()];
    for (z, o) in out.iter_mut().enumerate() {
        let id = h.add_direction(node_direction(grid, z, mu))?;
        h.ensure_backward(&[a, id])?;
        let t_a = dot(h.backward_path(&[id])?.snapshot(0), d1.values()) * dx;
        let t_b = dot(h.backward_path(&[a, id])?.snapshot(0), mu.values()) * dx;
        *o = -i1[z] + t_a + t_b + v1a[z] + t_d;
        h.evict(id);
    }
    Ok(IChainResult {
        j,
        values: GridFunction::new(grid, out)?,
    })
}

/// Forward side of the chain pairing: `∫ξ dm^(j)(t)` with arguments
/// `(δ_a − μ)` (mollified) followed by `μ̂ − μ`, iterated convention.
#[allow(clippy::too_many_arguments)]
pub fn chain_pairing_forward(
    model: &dyn DriftModel,
    xi: &GridFunction,
    t: f64,
    mu: &GridMeasure,
    dirac_args: &[f64],
    cells: f64,
    mu_hat: &GridMeasure,
    cfg: &SolveConfig,
) -> Result<f64> {
    let base = solve_fp(model, mu, t, cfg)?;
    let mut h = Hierarchy::new(model, &base, Convention::Iterated);
    let mut slots = Vec::new();
    for &z in dirac_args {
        slots.push(h.add_direction(dirac_direction(z, cells, mu)?)?);
    }
    slots.push(h.add_argument(mu_hat)?);
    h.ensure_forward(&slots)?;
    let path = h.forward_path(&slots)?;
    Ok(dot(xi.values(), path.snapshot(path.steps())) * model.grid().dx())
}

/// Difference-quotient estimate of an `order`-th directional derivative
/// along `(1 − ε)μ + εν`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdEstimate {
    pub order: usize,
    pub eps: Vec<f64>,
    pub quotients: Vec<f64>,
    /// Richardson-extrapolated from the two smallest `ε`.
    pub estimate: f64,
    /// Taylor remainder with the extrapolated derivatives.
    pub remainders: Vec<f64>,
    pub slope: f64,
}

impl FdEstimate {
    /// CSV `eps,remainder,slope`.
    pub fn to_csv(&self) -> String {
        sweep_csv(&self.eps, &self.remainders, self.slope)
    }
}

pub(crate) fn sweep_csv(eps: &[f64], rem: &[f64], slope: f64) -> String {
    let mut out = String::from("eps,remainder,slope\n");
    for (e, r) in eps.iter().zip(rem) {
        out.push_str(&format!("{},{},{}\n", fmt_float(*e), fmt_float(*r), fmt_float(slope)));
    }
    out
}

fn extrapolate_linear(eps: &[f64], q: &[f64]) -> f64 {
    let n = eps.len();
    let r = eps[n - 2] / eps[n - 1];
    (r * q[n - 1] - q[n - 2]) / (r - 1.0)
}

/// Orders 1 and 2. `eps` must hold at least three strictly decreasing values
/// in `(0, 1/2]` (order 2 also evaluates at `2ε`).
pub fn fd_oracle(
    order: usize,
    functional: impl Fn(&GridMeasure) -> Result<f64>,
    mu: &GridMeasure,
    direction: &GridMeasure,
    eps: &[f64],
) -> Result<FdEstimate> {
    if eps.len() < 3 || eps.windows(2).any(|w| w[1] >= w[0]) || eps[eps.len() - 1] <= 0.0 {
        return Err(Error::Parameter("need ≥ 3 strictly decreasing positive ε".into()));
    }
    let eval = |e: f64| -> Result<f64> {
        let v = functional(&mu.mix(direction, e)?)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("functional at ε = {e}")))
        }
    };
    let f0 = eval(0.0)?;
    let f: Vec<f64> = eps.iter().map(|&e| eval(e)).collect::<Result<_>>()?;
    let q1: Vec<f64> = eps.iter().zip(&f).map(|(e, v)| (v - f0) / e).collect();
    let d1 = extrapolate_linear(eps, &q1);
    let (quotients, estimate, remainders): (Vec<f64>, f64, Vec<f64>) = match order {
        1 => {
            let rem = eps.iter().zip(&f).map(|(e, v)| (v - f0 - e * d1).abs()).collect();
            (q1, d1, rem)
        }
        2 => {
            let f2: Vec<f64> = eps.iter().map(|&e| eval(2.0 * e)).collect::<Result<_>>()?;
            let q2: Vec<f64> = eps
                .iter()
                .zip(&f)
                .zip(&f2)
                .map(|((e, v), w)| (w - 2.0 * v + f0) / (e * e))
                .collect();
            let d2 = extrapolate_linear(eps, &q2);
            let rem = eps
                .iter()
                .zip(&f)
                .map(|(e, v)| (v - f0 - e * d1 - 0.5 * e * e * d2).abs())
                .collect();
            (q2, d2, rem)
        }
        _ => return Err(Error::Unsupported(format!("difference oracle of order {order}"))),
    };
    let slope = loglog_fit(eps, &remainders).0;
    Ok(FdEstimate {
        order,
        eps: eps.to_vec(),
        quotients,
        estimate,
        remainders,
        slope,
    })
}

/// Central mixed difference for `D²F(μ)[d_1, d_2]`, Richardson-extrapolated
/// in `ε` (steps `ε` and `2ε`). `ε` is reduced when needed so that every
/// perturbed density keeps at least half of `min μ`.
pub fn fd_mixed_second(
    functional: impl Fn(&GridMeasure) -> Result<f64>,
    mu: &GridMeasure,
    d1: &SignedGridField,
    d2: &SignedGridField,
    eps: f64,
) -> Result<f64> {
    let floor = mu.values().iter().copied().fold(f64::INFINITY, f64::min);
    let spread = 2.0 * (d1.sup_norm() + d2.sup_norm());
    let eps = if spread > 0.0 { eps.min(0.5 * floor / spread) } else { eps };
    let quotient = |e: f64| -> Result<f64> {
        let mut acc = 0.0;
        for (s1, s2, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
            acc += w * functional(&mu.perturbed(&[(s1 * e, d1), (s2 * e, d2)])?)?;
        }
        Ok(acc / (4.0 * e * e))
    };
    let fine = quotient(eps)?;
    let coarse = quotient(2.0 * eps)?;
    let v = (4.0 * fine - coarse) / 3.0;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("mixed difference".into()))
    }
}

/// `U(t, ν) = Φ(m(t, ν))`.
pub fn value_of(
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    t: f64,
    nu: &GridMeasure,
    cfg: &SolveConfig,
) -> Result<f64> {
    let path = solve_fp(model, nu, t, cfg)?;
    Ok(phi.eval(path.snapshot(path.steps())))
}

/// Nested-difference oracle for the second kernel at grid nodes `(z_1, z_2)`,
/// with the same mollification and `h`-extrapolation as the kernel.
#[allow(clippy::too_many_arguments)]
pub fn second_kernel_oracle(
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    t: f64,
    mu: &GridMeasure,
    z: (usize, usize),
    opts: &KernelOptions,
    eps: f64,
    cfg: &SolveConfig,
) -> Result<f64> {
    let grid = model.grid();
    opts.validate(grid)?;
    let levels: Vec<Vec<f64>> = opts
        .cells
        .iter()
        .map(|&c| {
            let d1 = dirac_direction(grid.node(z.0), c, mu)?;
            let d2 = dirac_direction(grid.node(z.1), c, mu)?;
            let u = |nu: &GridMeasure| value_of(model, phi, t, nu, cfg);
            Ok(vec![fd_mixed_second(u, mu, &d1, &d2, eps)?])
        })
        .collect::<Result<_>>()?;
    Ok(richardson(&levels)[0])
}

/// An `ε` sweep with its fitted log-log slope.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub eps: Vec<f64>,
    /// Abscissa of the fit (`ε` itself, or `W_1` for the measure sweep).
    pub scale: Vec<f64>,
    pub remainders: Vec<f64>,
    pub slope: f64,
}

impl Sweep {
    fn new(eps: &[f64], scale: Vec<f64>, remainders: Vec<f64>) -> Self {
        let slope = loglog_fit(&scale, &remainders).0;
        Self {
            eps: eps.to_vec(),
            scale,
            remainders,
            slope,
        }
    }

    /// CSV `eps,remainder,slope`.
    pub fn to_csv(&self) -> String {
        sweep_csv(&self.eps, &self.remainders, self.slope)
    }
}

/// Taylor remainder of `ε ↦ U(t, (1−ε)μ + εμ̂)` using the assembled kernels
/// of orders `1..=k` (`k ≤ 2`).
#[allow(clippy::too_many_arguments)]
pub fn verify_expansion(
    k: usize,
    model: &dyn DriftModel,
    phi: &dyn TestFunctional,
    t: f64,
    mu: &GridMeasure,
    mu_hat: &GridMeasure,
    eps: &[f64],
    opts: &KernelOptions,
    cfg: &SolveConfig,
) -> Result<Sweep> {
    if k == 0 || k > 2 {
        return Err(Error::Unsupported(format!("expansion of order {k}")));
    }
    let d = mu_hat.minus(mu)?;
    let k1 = assemble_kernel(1, model, phi, t, mu, &KernelOptions { stride: 1, ..opts.clone() }, cfg)?;
    let first = k1.pair(&[&d])?;
    let second = if k == 2 {
        assemble_kernel(2, model, phi, t, mu, opts, cfg)?.pair(&[&d, &d])?
    } else {
        0.0
    };
    let u0 = value_of(model, phi, t, mu, cfg)?;
    let rem: Vec<f64> = eps
        .iter()
        .map(|&e| {
            let u = value_of(model, phi, t, &mu.mix(mu_hat, e)?, cfg)?;
            Ok((u - u0 - e * first - 0.5 * e * e * second).abs())
        })
        .collect::<Result<_>>()?;
    Ok(Sweep::new(eps, eps.to_vec(), rem))
}

/// `‖m(t, μ_ε) − m(t, μ) − m^(1)(t, μ, μ_ε)‖_{−(n,∞)}` against `W_1(μ, μ_ε)`,
/// `μ_ε = (1−ε)μ + εμ̂`.
#[allow(clippy::too_many_arguments)]
pub fn m1_remainder_sweep(
    model: &dyn DriftModel,
    t: f64,
    mu: &GridMeasure,
    mu_hat: &GridMeasure,
    eps: &[f64],
    n: u32,
    modes: usize,
    cfg: &SolveConfig,
) -> Result<Sweep> {
    let grid = model.grid();
    let base = solve_fp(model, mu, t, cfg)?;
    let m_t = base.final_measure();
    let m1 = solve_linear_forward(
        model,
        &base,
        mu_hat.minus(mu)?.into_values(),
        |_, _| Ok(false),
        false,
    )?
    .final_field();
    let mut w1 = Vec::new();
    let mut rem = Vec::new();
    for &e in eps {
        let nu = mu.mix(mu_hat, e)?;
        let pert = solve_fp(model, &nu, t, cfg)?.final_measure();
        let r: Vec<f64> = (0..grid.len())
            .map(|j| pert.values()[j] - m_t.values()[j] - e * m1.values()[j])
            .collect();
        rem.push(dual_sup_norm(&SignedGridField::new(grid, r), n, modes));
        w1.push(wasserstein1(mu, &nu)?);
    }
    Ok(Sweep::new(eps, w1, rem))
}

/// `‖m(t, μ̂) − m(t, μ) − m^(1)(t, μ, μ̂)‖_∞`.
pub fn affine_defect(
    model: &dyn DriftModel,
    t: f64,
    mu: &GridMeasure,
    mu_hat: &GridMeasure,
    cfg: &SolveConfig,
) -> Result<f64> {
    let base = solve_fp(model, mu, t, cfg)?;
    let other = solve_fp(model, mu_hat, t, cfg)?.final_measure();
    let m1 = solve_linear_forward(model, &base, mu_hat.minus(mu)?.into_values(), |_, _| Ok(false), false)?
        .final_field();
    let m_t = base.final_measure();
    Ok((0..model.grid().len())
        .map(|j| (other.values()[j] - m_t.values()[j] - m1.values()[j]).abs())
        .fold(0.0, f64::max))
}

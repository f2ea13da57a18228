//! Drifts `b(x, μ)` and test functionals `Φ(μ)` of convolution type, with
//! their linear functional derivatives of every order in closed form:
//!
//! `δ^ℓ b/δm^ℓ(x, μ)(y_1, …, y_ℓ) = (-1)^ℓ (∫F(x,y) μ(dy) − F(x, y_ℓ))`
//!
//! and likewise for `Φ(μ) = ∫G dμ`. Paired against signed fields
//! `q_1, …, q_ℓ` this gives
//! `(-1)^ℓ Π_{i<ℓ}(∫q_i) · (∫F dμ ∫q_ℓ − ∫F(x,y) q_ℓ(dy))`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::torus::{
    dot, gradient_into, integrate, interpolate, parse_field_csv, wasserstein1, Grid,
    GridFunction, GridMeasure,
};

/// Resolved Fourier slot of a separable term: frequency index and sin/cos.
type Slot = Option<(usize, bool)>;

/// Trigonometric factor `1`, `cos 2πjx` or `sin 2πjx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Basis {
    One,
    Cos(u32),
    Sin(u32),
}

impl Basis {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Basis::One => 1.0,
            Basis::Cos(j) => (2.0 * PI * j as f64 * x).cos(),
            Basis::Sin(j) => (2.0 * PI * j as f64 * x).sin(),
        }
    }
}

/// `coef · left(x) · right(y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparableTerm {
    pub coef: f64,
    pub left: Basis,
    pub right: Basis,
}

/// Interaction kernel `F(x, y)` on the product torus.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvolutionKernel {
    /// Finite sum of trigonometric products; O(rank) per evaluation point.
    Separable(Vec<SeparableTerm>),
    /// `F(x_i, y_j) = row[(i - j) mod M]`.
    Circulant(Vec<f64>),
    /// Row-major `M × M` samples `F(x_i, y_j)`.
    Table(Vec<f64>),
}

/// Which regularity assumptions a model satisfies, and up to which orders.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionRecord {
    pub integrability: bool,
    pub lipschitz: bool,
    /// Highest spatial derivative order covered; `None` means all.
    pub max_n: Option<u32>,
    /// Highest measure-derivative order covered; `None` means all.
    pub max_k: Option<usize>,
    pub note: String,
}

/// A drift `b(x, μ)` and its measure derivatives, evaluated at every node.
pub trait DriftModel: Send + Sync {
    fn grid(&self) -> Grid;

    /// `out[j] = b(x_j, m)`.
    fn drift(&self, m: &[f64], out: &mut [f64]);

    /// `out[j] = δ^ℓ b/δm^ℓ(x_j, m)` paired with `args` (ℓ = `args.len()` ≥ 1).
    fn deriv(&self, m: &[f64], args: &[&[f64]], out: &mut [f64]);

    /// False when `b` does not depend on the measure at all.
    fn measure_dependent(&self) -> bool;

    /// Drift at arbitrary `targets` for the atomic measure `Σ w_k δ_{sources_k}`.
    fn drift_empirical(&self, targets: &[f64], sources: &[f64], weights: &[f64], out: &mut [f64]);

    fn assumptions(&self) -> AssumptionRecord;

    fn name(&self) -> &str;

    /// `b(x_j, μ)` at one node.
    fn eval_at(&self, j: usize, mu: &GridMeasure) -> f64 {
        let mut out = vec![0.0; self.grid().len()];
        self.drift(mu.values(), &mut out);
        out[j]
    }
}

/// A functional `Φ(μ)` with derivatives of every order.
pub trait TestFunctional: Send + Sync {
    fn grid(&self) -> Grid;

    fn eval(&self, mu: &[f64]) -> f64;

    /// Highest supported derivative order.
    fn max_order(&self) -> usize;

    /// `δ^ℓΦ/δm^ℓ(μ)(y_1, …, y_ℓ)` at grid nodes.
    fn deriv_at(&self, mu: &[f64], points: &[usize]) -> f64;

    /// `δ^ℓΦ/δm^ℓ(μ)` paired with signed fields (ℓ = `args.len()`).
    fn pairing(&self, mu: &[f64], args: &[&[f64]]) -> f64;

    /// `y ↦ δΦ/δm(μ)(y)` on the grid.
    fn first_variation(&self, mu: &[f64]) -> Vec<f64>;

    /// `Φ` of the atomic measure `Σ w_k δ_{positions_k}`.
    fn eval_weighted(&self, positions: &[f64], weights: &[f64]) -> f64;

    /// `Φ` of the empirical measure of `positions`.
    fn eval_empirical(&self, positions: &[f64]) -> f64 {
        let w = vec![1.0 / positions.len() as f64; positions.len()];
        self.eval_weighted(positions, &w)
    }

    fn name(&self) -> &str;
}

/// `b(x, μ) = ∫F(x,y) μ(dy) + e(x)`, the convolution family; `e = −∇V`.
#[derive(Debug, Clone)]
pub struct ConvolutionDrift {
    grid: Grid,
    kernel: Option<ConvolutionKernel>,
    separable_tables: Vec<(f64, Vec<f64>, Vec<f64>)>,
    external: Vec<f64>,
    external_flat: bool,
    name: String,
}

impl ConvolutionDrift {
    pub fn new(
        grid: Grid,
        kernel: Option<ConvolutionKernel>,
        external: Option<Vec<f64>>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let m = grid.len();
        let separable_tables = match &kernel {
            Some(ConvolutionKernel::Separable(terms)) => terms
                .iter()
                .map(|t| (t.coef, grid.sample(|x| t.left.eval(x)), grid.sample(|y| t.right.eval(y))))
                .collect(),
            Some(ConvolutionKernel::Circulant(row)) if row.len() != m => {
                return Err(Error::GridMismatch(m, row.len()))
            }
            Some(ConvolutionKernel::Table(t)) if t.len() != m * m => {
                return Err(Error::GridMismatch(m * m, t.len()))
            }
            _ => Vec::new(),
        };
        let kernel_values: Box<dyn Iterator<Item = &f64>> = match &kernel {
            Some(ConvolutionKernel::Circulant(v)) | Some(ConvolutionKernel::Table(v)) => {
                Box::new(v.iter())
            }
            _ => Box::new(std::iter::empty()),
        };
        if kernel_values.chain(external.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel table".into()));
        }
        let external = external.unwrap_or_else(|| vec![0.0; m]);
        if external.len() != m {
            return Err(Error::GridMismatch(m, external.len()));
        }
        let external_flat = external.iter().all(|&e| e == 0.0);
        Ok(Self {
            grid,
            kernel,
            separable_tables,
            external,
            external_flat,
            name: name.into(),
        })
    }

    pub fn kernel(&self) -> Option<&ConvolutionKernel> {
        self.kernel.as_ref()
    }

    pub fn external(&self) -> &[f64] {
        &self.external
    }

    /// `out[i] = ∫F(x_i, y) q(dy)` by node quadrature.
    pub fn apply_kernel(&self, q: &[f64], out: &mut [f64]) {
        let m = self.grid.len();
        let dx = self.grid.dx();
        match &self.kernel {
            None => out.iter_mut().for_each(|o| *o = 0.0),
            Some(ConvolutionKernel::Separable(_)) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (coef, left, right) in &self.separable_tables {
                    let s = coef * dot(right, q) * dx;
                    for (o, l) in out.iter_mut().zip(left) {
                        *o += s * l;
                    }
                }
            }
            Some(ConvolutionKernel::Circulant(row)) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, qj) in q.iter().enumerate() {
                        acc += row[(i + m - j) % m] * qj;
                    }
                    *o = acc * dx;
                }
            }
            Some(ConvolutionKernel::Table(t)) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(&t[i * m..(i + 1) * m], q) * dx;
                }
            }
        }
    }

    /// `F(x, y)` at arbitrary points (interpolated for sampled kernels).
    pub fn kernel_at(&self, x: f64, y: f64) -> f64 {
        match &self.kernel {
            None => 0.0,
            Some(ConvolutionKernel::Separable(terms)) => terms
                .iter()
                .map(|t| t.coef * t.left.eval(x) * t.right.eval(y))
                .sum(),
            Some(ConvolutionKernel::Circulant(row)) => interpolate(row, (x - y).rem_euclid(1.0)),
            Some(ConvolutionKernel::Table(t)) => {
                let m = self.grid.len();
                let s = x.rem_euclid(1.0) * m as f64;
                let i = (s.floor() as usize).min(m - 1);
                let w = s - i as f64;
                let row = |r: usize| interpolate(&t[r * m..(r + 1) * m], y);
                (1.0 - w) * row(i) + w * row((i + 1) % m)
            }
        }
    }
}

impl DriftModel for ConvolutionDrift {
    fn grid(&self) -> Grid {
        self.grid
    }

    fn drift(&self, m: &[f64], out: &mut [f64]) {
        self.apply_kernel(m, out);
        for (o, e) in out.iter_mut().zip(&self.external) {
            *o += e;
        }
    }

    fn deriv(&self, m: &[f64], args: &[&[f64]], out: &mut [f64]) {
        let order = args.len();
        assert!(order >= 1, "derivative order must be positive");
        if self.kernel.is_none() {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let dx = self.grid.dx();
        let sign = if order.is_multiple_of(2) { 1.0 } else { -1.0 };
        let prefactor: f64 = sign
            * args[..order - 1]
                .iter()
                .map(|q| integrate(q, dx))
                .product::<f64>();
        let last = args[order - 1];
        let last_mass = integrate(last, dx);
        let mut fq = vec![0.0; out.len()];
        self.apply_kernel(last, &mut fq);
        if last_mass != 0.0 {
            self.apply_kernel(m, out);
            for (o, f) in out.iter_mut().zip(&fq) {
                *o = prefactor * (*o * last_mass - f);
            }
        } else {
            for (o, f) in out.iter_mut().zip(&fq) {
                *o = -prefactor * f;
            }
        }
    }

    fn measure_dependent(&self) -> bool {
        self.kernel.is_some()
    }

    fn drift_empirical(&self, targets: &[f64], sources: &[f64], weights: &[f64], out: &mut [f64]) {
        let flat = self.external_flat;
        let ext = |x: f64| if flat { 0.0 } else { interpolate(&self.external, x) };
        match &self.kernel {
            None => {
                for (o, &x) in out.iter_mut().zip(targets) {
                    *o = ext(x);
                }
            }
            Some(ConvolutionKernel::Separable(terms)) => {
                // one sin_cos per point and distinct frequency
                let mut freqs: Vec<u32> = Vec::new();
                // basis → (frequency slot, is_sin); None for the constant
                let mut slot = |b: Basis| -> Option<(usize, bool)> {
                    let (j, is_sin) = match b {
                        Basis::One => return None,
                        Basis::Cos(j) => (j, false),
                        Basis::Sin(j) => (j, true),
                    };
                    let k = freqs.iter().position(|&f| f == j).unwrap_or_else(|| {
                        freqs.push(j);
                        freqs.len() - 1
                    });
                    Some((k, is_sin))
                };
                let resolved: Vec<(f64, Slot, Slot)> =
                    terms.iter().map(|t| (t.coef, slot(t.left), slot(t.right))).collect();
                let table = |pts: &[f64]| -> Vec<Vec<(f64, f64)>> {
                    freqs
                        .iter()
                        .map(|&j| pts.iter().map(|&x| (2.0 * PI * j as f64 * x).sin_cos()).collect())
                        .collect()
                };
                #[inline]
                fn lookup(tab: &[Vec<(f64, f64)>], s: Slot, i: usize) -> f64 {
                    match s {
                        None => 1.0,
                        Some((k, true)) => tab[k][i].0,
                        Some((k, false)) => tab[k][i].1,
                    }
                }
                let src = table(sources);
                let tgt_owned;
                let tgt = if std::ptr::eq(targets, sources) {
                    &src
                } else {
                    tgt_owned = table(targets);
                    &tgt_owned
                };
                let sums: Vec<f64> = resolved
                    .iter()
                    .map(|&(c, _, r)| {
                        c * weights.iter().enumerate().map(|(i, w)| w * lookup(&src, r, i)).sum::<f64>()
                    })
                    .collect();
                for (i, (o, &x)) in out.iter_mut().zip(targets).enumerate() {
                    *o = ext(x)
                        + resolved
                            .iter()
                            .zip(&sums)
                            .map(|(&(_, l, _), s)| lookup(tgt, l, i) * s)
                            .sum::<f64>();
                }
            }
            Some(_) => {
                for (o, &x) in out.iter_mut().zip(targets) {
                    *o = ext(x)
                        + sources
                            .iter()
                            .zip(weights)
                            .map(|(&y, w)| w * self.kernel_at(x, y))
                            .sum::<f64>();
                }
            }
        }
    }

    fn assumptions(&self) -> AssumptionRecord {
        let smooth = matches!(self.kernel, None | Some(ConvolutionKernel::Separable(_)));
        AssumptionRecord {
            integrability: true,
            lipschitz: true,
            max_n: if smooth { None } else { Some(2) },
            max_k: None,
            note: if smooth {
                "trigonometric kernel: bounded derivatives of every order in x and y".into()
            } else {
                "sampled kernel: regularity limited to the finite-difference order".into()
            },
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}

fn grid_gradient(grid: Grid, f: &GridFunction) -> Result<Vec<f64>> {
    grid.check(&f.grid())?;
    let mut g = vec![0.0; grid.len()];
    gradient_into(f.values(), grid.dx(), &mut g);
    Ok(g)
}

/// `b(x, μ) = ∫F(x,y) μ(dy)`.
pub fn convolution_drift(grid: Grid, kernel: ConvolutionKernel) -> Result<ConvolutionDrift> {
    ConvolutionDrift::new(grid, Some(kernel), None, "convolution")
}

/// Kuramoto drift `−(K/π) ∫ sin 2π(x−y) μ(dy)`.
pub fn kuramoto(grid: Grid, coupling: f64) -> Result<ConvolutionDrift> {
    let c = coupling / PI;
    let kernel = ConvolutionKernel::Separable(vec![
        SeparableTerm {
            coef: -c,
            left: Basis::Sin(1),
            right: Basis::Cos(1),
        },
        SeparableTerm {
            coef: c,
            left: Basis::Cos(1),
            right: Basis::Sin(1),
        },
    ]);
    ConvolutionDrift::new(grid, Some(kernel), None, format!("kuramoto(K={coupling})"))
}

/// Granular-media drift `−∫∇W(x−y) μ(dy) − ∇V(x)`, gradients by central differences.
pub fn aggregation_drift(
    grid: Grid,
    v: &GridFunction,
    w: &GridFunction,
) -> Result<ConvolutionDrift> {
    let grad_w = grid_gradient(grid, w)?;
    let grad_v = grid_gradient(grid, v)?;
    let kernel = if grad_w.iter().all(|g| *g == 0.0) {
        None
    } else {
        Some(ConvolutionKernel::Circulant(grad_w.iter().map(|g| -g).collect()))
    };
    ConvolutionDrift::new(
        grid,
        kernel,
        Some(grad_v.iter().map(|g| -g).collect()),
        "aggregation",
    )
}

/// Measure-independent drift `b(x)` given by node values.
pub fn decoupled_drift(grid: Grid, b: Vec<f64>) -> Result<ConvolutionDrift> {
    ConvolutionDrift::new(grid, None, Some(b), "decoupled")
}

/// `Φ(μ) = ∫G dμ`.
#[derive(Debug, Clone)]
pub struct LinearFunctional {
    grid: Grid,
    g: Vec<f64>,
}

pub fn linear_functional(g: &GridFunction) -> LinearFunctional {
    LinearFunctional {
        grid: g.grid(),
        g: g.values().to_vec(),
    }
}

impl LinearFunctional {
    pub fn g(&self) -> &[f64] {
        &self.g
    }
}

impl TestFunctional for LinearFunctional {
    fn grid(&self) -> Grid {
        self.grid
    }

    fn eval(&self, mu: &[f64]) -> f64 {
        dot(&self.g, mu) * self.grid.dx()
    }

    fn max_order(&self) -> usize {
        usize::MAX
    }

    fn deriv_at(&self, mu: &[f64], points: &[usize]) -> f64 {
        let order = points.len();
        let sign = if order.is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * (self.eval(mu) - self.g[points[order - 1] % self.g.len()])
    }

    fn pairing(&self, mu: &[f64], args: &[&[f64]]) -> f64 {
        let order = args.len();
        assert!(order >= 1, "derivative order must be positive");
        let dx = self.grid.dx();
        let sign = if order.is_multiple_of(2) { 1.0 } else { -1.0 };
        let prefactor: f64 = args[..order - 1].iter().map(|q| integrate(q, dx)).product();
        let last = args[order - 1];
        sign * prefactor * (self.eval(mu) * integrate(last, dx) - self.eval(last))
    }

    fn first_variation(&self, mu: &[f64]) -> Vec<f64> {
        let mean = self.eval(mu);
        self.g.iter().map(|g| g - mean).collect()
    }

    fn eval_weighted(&self, positions: &[f64], weights: &[f64]) -> f64 {
        positions
            .iter()
            .zip(weights)
            .map(|(&y, w)| w * interpolate(&self.g, y))
            .sum()
    }

    fn name(&self) -> &str {
        "linear"
    }
}

/// Either kind of object whose assumptions can be probed.
pub enum ModelRef<'a> {
    Drift(&'a dyn DriftModel),
    Functional(&'a dyn TestFunctional),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionEstimate {
    pub tag: String,
    pub estimate: f64,
    /// Ratio of the estimate at spacing `dx` to spacing `2dx`; ≈ 2^n signals a jump.
    pub refinement_ratio: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub entries: Vec<AssumptionEstimate>,
}

impl AssumptionReport {
    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.estimate.is_finite())
    }

    pub fn any_flagged(&self) -> bool {
        self.entries.iter().any(|e| e.flagged)
    }

    pub fn get(&self, tag: &str) -> Option<&AssumptionEstimate> {
        self.entries.iter().find(|e| e.tag == tag)
    }
}

fn random_measure(grid: Grid, rng: &mut ChaCha8Rng) -> GridMeasure {
    let modes: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(-0.3..0.3), rng.random_range(0.0..1.0)))
        .collect();
    GridMeasure::from_fn(grid, |x| {
        1.0 + modes
            .iter()
            .enumerate()
            .map(|(j, (a, p))| a * (2.0 * PI * ((j + 1) as f64 * x + p)).cos())
            .sum::<f64>()
    })
    .expect("positive by construction")
}

/// Sup of the n-th central difference quotient at spacing `stride * dx`.
fn derivative_sup(values: &[f64], dx: f64, n: u32, stride: usize) -> f64 {
    let m = values.len();
    let h = dx * stride as f64;
    let mut cur = values.to_vec();
    for _ in 0..n {
        cur = (0..m)
            .map(|j| (cur[(j + stride) % m] - cur[(j + m - stride) % m]) / (2.0 * h))
            .collect();
    }
    cur.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn regularity_entry(tag: String, samples: &[Vec<f64>], dx: f64, n: u32) -> AssumptionEstimate {
    let fine = samples
        .iter()
        .map(|s| derivative_sup(s, dx, n, 1))
        .fold(0.0, f64::max);
    let coarse = samples
        .iter()
        .map(|s| derivative_sup(s, dx, n, 2))
        .fold(0.0, f64::max);
    let ratio = if coarse > 0.0 { fine / coarse } else { 1.0 };
    AssumptionEstimate {
        tag,
        estimate: fine,
        refinement_ratio: ratio,
        flagged: !fine.is_finite() || (n >= 1 && ratio > 1.5),
    }
}

fn lipschitz_entry(tag: String, ratios: impl Iterator<Item = f64>) -> AssumptionEstimate {
    let est = ratios.fold(0.0, f64::max);
    AssumptionEstimate {
        tag,
        estimate: est,
        refinement_ratio: 1.0,
        flagged: !est.is_finite(),
    }
}

/// Monte Carlo estimates of the sup and Lipschitz quantities in the
/// integrability/regularity assumptions, over sampled measures.
pub fn validate_assumptions(
    model: ModelRef<'_>,
    n: u32,
    k: usize,
    sample_count: usize,
    seed: u64,
) -> AssumptionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    match model {
        ModelRef::Drift(b) => {
            let grid = b.grid();
            let m = grid.len();
            let dx = grid.dx();
            let mus: Vec<GridMeasure> = (0..sample_count.max(2))
                .map(|_| random_measure(grid, &mut rng))
                .collect();
            let ys: Vec<usize> = (0..4).map(|_| rng.random_range(0..m)).collect();
            let dirac = |j: usize| -> Vec<f64> { GridMeasure::discrete_dirac(grid, j).into_values() };
            // slot functions x ↦ δ^ℓ b(x, μ)(y, …, y); ℓ = 0 is b itself
            let slot = |mu: &GridMeasure, order: usize, y: usize| -> Vec<f64> {
                let mut out = vec![0.0; m];
                if order == 0 {
                    b.drift(mu.values(), &mut out);
                } else {
                    let d = dirac(y);
                    let args: Vec<&[f64]> = (0..order).map(|_| d.as_slice()).collect();
                    b.deriv(mu.values(), &args, &mut out);
                }
                out
            };
            for order in 0..=k {
                for i in 0..=n {
                    let samples: Vec<Vec<f64>> = mus
                        .iter()
                        .flat_map(|mu| ys.iter().map(move |&y| (mu, y)))
                        .map(|(mu, y)| slot(mu, order, y))
                        .collect();
                    entries.push(regularity_entry(format!("Int-b(n={i},l={order})"), &samples, dx, i));
                }
                let ratios = mus.windows(2).flat_map(|pair| {
                    let w = wasserstein1(&pair[0], &pair[1]).unwrap_or(f64::NAN);
                    ys.iter()
                        .map(|&y| {
                            let a = slot(&pair[0], order, y);
                            let c = slot(&pair[1], order, y);
                            a.iter().zip(&c).fold(0.0, |acc: f64, (u, v)| acc.max((u - v).abs())) / w
                        })
                        .collect::<Vec<_>>()
                });
                entries.push(lipschitz_entry(format!("Lip-b(l={order})"), ratios));
            }
        }
        ModelRef::Functional(phi) => {
            let grid = phi.grid();
            let m = grid.len();
            let dx = grid.dx();
            let mus: Vec<GridMeasure> = (0..sample_count.max(2))
                .map(|_| random_measure(grid, &mut rng))
                .collect();
            let lip = mus.windows(2).map(|p| {
                (phi.eval(p[0].values()) - phi.eval(p[1].values())).abs()
                    / wasserstein1(&p[0], &p[1]).unwrap_or(f64::NAN)
            });
            entries.push(lipschitz_entry("TLip-Phi".into(), lip));
            for order in 1..=k.min(phi.max_order()) {
                let samples: Vec<Vec<f64>> = mus
                    .iter()
                    .map(|mu| {
                        (0..m)
                            .map(|y| {
                                let pts: Vec<usize> = vec![y; order];
                                phi.deriv_at(mu.values(), &pts)
                            })
                            .collect()
                    })
                    .collect();
                entries.push(regularity_entry(format!("TInt-Phi(l={order})"), &samples, dx, 0));
                for i in 1..=n {
                    entries.push(regularity_entry(
                        format!("TReg-Phi(n={i},l={order})"),
                        &samples,
                        dx,
                        i,
                    ));
                }
            }
        }
    }
    AssumptionReport { entries }
}

/// Parsed model definition file.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Kuramoto { coupling: f64 },
    Aggregation { v: Option<PathBuf>, w: Option<PathBuf> },
    Convolution { kernel: PathBuf },
}

pub const MODEL_KEYS: &[&str] = &["model", "K", "V", "W", "kernel"];

impl ModelSpec {
    /// Relative table paths resolve against `base_dir`.
    pub fn from_kv(kv: &KeyValues, base_dir: &Path) -> Result<Self> {
        kv.check_keys(MODEL_KEYS)?;
        let path = |key: &str| kv.raw(key).map(|p| base_dir.join(p));
        match kv.raw("model") {
            Some("kuramoto") => Ok(ModelSpec::Kuramoto {
                coupling: kv.get("K")?.unwrap_or(1.0),
            }),
            Some("aggregation") => Ok(ModelSpec::Aggregation {
                v: path("V"),
                w: path("W"),
            }),
            Some("convolution") => Ok(ModelSpec::Convolution {
                kernel: path("kernel").ok_or_else(|| Error::Config {
                    line: kv.line_of("model"),
                    msg: "convolution model needs `kernel = <csv>`".into(),
                })?,
            }),
            Some(other) => Err(Error::Config {
                line: kv.line_of("model"),
                msg: format!("unknown model {other:?}"),
            }),
            None => Err(Error::Config {
                line: 0,
                msg: "missing `model` key".into(),
            }),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn build(&self, grid: Grid) -> Result<ConvolutionDrift> {
        match self {
            ModelSpec::Kuramoto { coupling } => kuramoto(grid, *coupling),
            ModelSpec::Aggregation { v, w } => {
                let load = |p: &Option<PathBuf>| -> Result<GridFunction> {
                    match p {
                        None => Ok(GridFunction::constant(grid, 0.0)),
                        Some(p) => {
                            let (g, vals) = parse_field_csv(&std::fs::read_to_string(p)?)?;
                            grid.check(&g)?;
                            GridFunction::new(grid, vals)
                        }
                    }
                };
                aggregation_drift(grid, &load(v)?, &load(w)?)
            }
            ModelSpec::Convolution { kernel } => {
                let table = parse_kernel_csv(&std::fs::read_to_string(kernel)?, grid)?;
                convolution_drift(grid, ConvolutionKernel::Table(table))
            }
        }
    }
}

/// Parses `x,y,value` rows, row-major over the `M × M` product grid.
pub fn parse_kernel_csv(text: &str, grid: Grid) -> Result<Vec<f64>> {
    let m = grid.len();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "x,y,value" => {}
        _ => {
            return Err(Error::Config {
                line: 1,
                msg: "expected header `x,y,value`".into(),
            })
        }
    }
    let mut table = Vec::with_capacity(m * m);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let value = fields
            .get(2)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("malformed row {line:?}"),
            })?;
        table.push(value);
    }
    if table.len() != m * m {
        return Err(Error::GridMismatch(m * m, table.len()));
    }
    Ok(table)
}

/// Renders a sampled kernel as `x,y,value` CSV.
pub fn kernel_csv(grid: Grid, f: impl Fn(f64, f64) -> f64) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("x,y,value\n");
    for x in grid.nodes() {
        for y in grid.nodes() {
            let _ = writeln!(out, "{x},{y},{:.16e}", f(x, y));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: usize) -> Grid {
        Grid::new(m).unwrap()
    }

    fn measure(g: Grid, a: f64, phase: f64) -> GridMeasure {
        GridMeasure::from_fn(g, |x| 1.0 + a * (2.0 * PI * (x + phase)).cos()).unwrap()
    }

    fn drift_of(b: &dyn DriftModel, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; b.grid().len()];
        b.drift(mu, &mut out);
        out
    }

    fn deriv_of(b: &dyn DriftModel, mu: &[f64], args: &[&[f64]]) -> Vec<f64> {
        let mut out = vec![0.0; b.grid().len()];
        b.deriv(mu, args, &mut out);
        out
    }

    #[test]
    fn cosine_kernel_derivative_at_uniform() {
        let g = grid(64);
        let kernel = ConvolutionKernel::Separable(vec![
            SeparableTerm { coef: 1.0, left: Basis::Cos(1), right: Basis::Cos(1) },
            SeparableTerm { coef: 1.0, left: Basis::Sin(1), right: Basis::Sin(1) },
        ]);
        let b = convolution_drift(g, kernel).unwrap();
        let mu = GridMeasure::uniform(g);
        let y = 5;
        let d = GridMeasure::discrete_dirac(g, y);
        let out = deriv_of(&b, mu.values(), &[d.values()]);
        for (j, v) in out.iter().enumerate() {
            // (−1)(∫F dμ − F(x,y)) with ∫F dμ = 0
            let expected = (2.0 * PI * (g.node(j) - g.node(y))).cos();
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn first_derivative_is_normalized() {
        let g = grid(64);
        let b = kuramoto(g, 2.5).unwrap();
        let mu = measure(g, 0.6, 0.1);
        // ∫ δb/δm(x,μ)(y) μ(dy) is the pairing with μ itself
        let out = deriv_of(&b, mu.values(), &[mu.values()]);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
        let phi = linear_functional(&GridFunction::from_fn(g, |x| (2.0 * PI * x).sin() + x * x).unwrap());
        for order in 1..4 {
            let args: Vec<&[f64]> = (0..order).map(|_| mu.values()).collect();
            assert!(phi.pairing(mu.values(), &args).abs() < 1e-12);
        }
    }

    #[test]
    fn increment_identity_first_and_second_order() {
        let g = grid(64);
        let b = kuramoto(g, 3.0).unwrap();
        let m0 = measure(g, 0.4, 0.0);
        let m1 = measure(g, -0.3, 0.27);
        let diff = m1.minus(&m0).unwrap();
        let nodes = 64;
        // order 1: ∫₀¹ δb/δm(m_s)(m1 − m0) ds = b(m1) − b(m0)
        let mut integral = vec![0.0; g.len()];
        for i in 0..=nodes {
            let s = i as f64 / nodes as f64;
            let ms = m0.mix(&m1, s).unwrap();
            let w = if i == 0 || i == nodes { 0.5 } else { 1.0 } / nodes as f64;
            let d = deriv_of(&b, ms.values(), &[diff.values()]);
            integral.iter_mut().zip(&d).for_each(|(acc, v)| *acc += w * v);
        }
        let lhs = drift_of(&b, m1.values());
        let rhs = drift_of(&b, m0.values());
        for j in 0..g.len() {
            assert!((integral[j] - (lhs[j] - rhs[j])).abs() < 1e-8);
        }
        // order 2 at a Dirac first slot
        let y = GridMeasure::discrete_dirac(g, 17);
        let mut integral = vec![0.0; g.len()];
        for i in 0..=nodes {
            let s = i as f64 / nodes as f64;
            let ms = m0.mix(&m1, s).unwrap();
            let w = if i == 0 || i == nodes { 0.5 } else { 1.0 } / nodes as f64;
            let d = deriv_of(&b, ms.values(), &[y.values(), diff.values()]);
            integral.iter_mut().zip(&d).for_each(|(acc, v)| *acc += w * v);
        }
        let at1 = deriv_of(&b, m1.values(), &[y.values()]);
        let at0 = deriv_of(&b, m0.values(), &[y.values()]);
        for j in 0..g.len() {
            assert!((integral[j] - (at1[j] - at0[j])).abs() < 1e-8);
        }
    }

    #[test]
    fn functional_increment_identity() {
        let g = grid(32);
        let phi = linear_functional(&GridFunction::from_fn(g, |x| (2.0 * PI * x).cos().powi(3)).unwrap());
        let m0 = measure(g, 0.4, 0.0);
        let m1 = measure(g, 0.2, 0.4);
        let diff = m1.minus(&m0).unwrap();
        // δΦ/δm does not depend on the base up to a constant: exact in one node
        let inc = phi.pairing(m0.values(), &[diff.values()]);
        assert!((inc - (phi.eval(m1.values()) - phi.eval(m0.values()))).abs() < 1e-13);
        assert!((phi.deriv_at(m0.values(), &[3]) - (phi.g()[3] - phi.eval(m0.values()))).abs() < 1e-15);
    }

    #[test]
    fn zero_mass_second_slot_vanishes() {
        let g = grid(32);
        let phi = linear_functional(&GridFunction::from_fn(g, |x| (2.0 * PI * x).sin()).unwrap());
        let mu = measure(g, 0.5, 0.0);
        let q1 = measure(g, 0.3, 0.2).minus(&mu).unwrap();
        let q2 = measure(g, -0.2, 0.7).minus(&mu).unwrap();
        assert!(phi.pairing(mu.values(), &[q1.values(), q2.values()]).abs() < 1e-15);
    }

    #[test]
    fn multilinear_in_each_slot() {
        let g = grid(32);
        let b = kuramoto(g, 1.7).unwrap();
        let mu = measure(g, 0.5, 0.0);
        let p = GridMeasure::discrete_dirac(g, 3).into_values();
        let q = measure(g, 0.3, 0.2).into_values();
        let r = measure(g, -0.4, 0.6).into_values();
        let (a, c) = (0.37, -1.9);
        let combo: Vec<f64> = q.iter().zip(&r).map(|(x, y)| a * x + c * y).collect();
        for slot in 0..2 {
            let mut args_q: Vec<&[f64]> = vec![&p, &p];
            let mut args_r = args_q.clone();
            let mut args_c = args_q.clone();
            args_q[slot] = &q;
            args_r[slot] = &r;
            args_c[slot] = &combo;
            let dq = deriv_of(&b, mu.values(), &args_q);
            let dr = deriv_of(&b, mu.values(), &args_r);
            let dc = deriv_of(&b, mu.values(), &args_c);
            for j in 0..g.len() {
                assert!((dc[j] - (a * dq[j] + c * dr[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_recovers_kuramoto() {
        let g = grid(256);
        let coupling = 2.0;
        let w = GridFunction::from_fn(g, |u| -coupling * (2.0 * PI * u).cos() / (2.0 * PI * PI)).unwrap();
        let agg = aggregation_drift(g, &GridFunction::constant(g, 0.0), &w).unwrap();
        let kur = kuramoto(g, coupling).unwrap();
        let mu = measure(g, 0.5, 0.1);
        let a = drift_of(&agg, mu.values());
        let k = drift_of(&kur, mu.values());
        let err = a.iter().zip(&k).fold(0.0, |acc: f64, (x, y)| acc.max((x - y).abs()));
        // central-difference gradient: relative error (2π dx)^2 / 6
        assert!(err < 1e-3 * coupling, "err={err}");
    }

    #[test]
    fn aggregation_without_interaction_is_decoupled() {
        let g = grid(64);
        let v = GridFunction::from_fn(g, |x| (2.0 * PI * x).sin()).unwrap();
        let b = aggregation_drift(g, &v, &GridFunction::constant(g, 0.0)).unwrap();
        assert!(!b.measure_dependent());
        let mu = measure(g, 0.5, 0.0);
        let q = measure(g, 0.1, 0.3).minus(&mu).unwrap();
        assert!(deriv_of(&b, mu.values(), &[q.values()]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empirical_drift_matches_grid_drift_on_nodes() {
        let g = grid(32);
        let b = kuramoto(g, 4.0).unwrap();
        let mu = measure(g, 0.5, 0.2);
        let nodes: Vec<f64> = g.nodes().collect();
        let weights: Vec<f64> = mu.values().iter().map(|v| v * g.dx()).collect();
        let mut emp = vec![0.0; g.len()];
        b.drift_empirical(&nodes, &nodes, &weights, &mut emp);
        let grid_drift = drift_of(&b, mu.values());
        for (e, d) in emp.iter().zip(&grid_drift) {
            assert!((e - d).abs() < 1e-12);
        }
        let table = convolution_drift(
            g,
            ConvolutionKernel::Table(
                (0..g.len() * g.len())
                    .map(|ij| b.kernel_at(g.node(ij / g.len()), g.node(ij % g.len())))
                    .collect(),
            ),
        )
        .unwrap();
        table.drift_empirical(&nodes, &nodes, &weights, &mut emp);
        for (e, d) in emp.iter().zip(&grid_drift) {
            assert!((e - d).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_models_pass_assumption_probe() {
        let g = grid(128);
        let b = kuramoto(g, 1.0).unwrap();
        let report = validate_assumptions(ModelRef::Drift(&b), 2, 2, 6, 7);
        assert!(report.all_finite());
        assert!(!report.any_flagged(), "{report:?}");
        // Lipschitz bound of δb/δm is ≤ Θ‖F‖ independent of the sampled pair
        let lip = report.get("Lip-b(l=1)").unwrap().estimate;
        assert!(lip < 2.0 * (2.0 * PI) * 2.0 / PI, "lip={lip}");
    }

    #[test]
    fn jump_in_g_raises_regularity_flag() {
        let g = grid(256);
        let phi = linear_functional(&GridFunction::from_fn(g, |x| if x < 0.5 { 0.0 } else { 1.0 }).unwrap());
        let report = validate_assumptions(ModelRef::Functional(&phi), 1, 1, 4, 3);
        assert!(!report.get("TInt-Phi(l=1)").unwrap().flagged);
        assert!(report.get("TReg-Phi(n=1,l=1)").unwrap().flagged);
        let smooth = linear_functional(&GridFunction::from_fn(g, |x| (2.0 * PI * x).cos()).unwrap());
        let report = validate_assumptions(ModelRef::Functional(&smooth), 2, 2, 4, 3);
        assert!(!report.any_flagged(), "{report:?}");
    }

    #[test]
    fn model_file_parsing() {
        let kv = KeyValues::parse("model = kuramoto\nK = 2.5\n").unwrap();
        assert_eq!(
            ModelSpec::from_kv(&kv, Path::new(".")).unwrap(),
            ModelSpec::Kuramoto { coupling: 2.5 }
        );
        let kv = KeyValues::parse("model = spin-glass\n").unwrap();
        assert!(matches!(ModelSpec::from_kv(&kv, Path::new(".")), Err(Error::Config { line: 1, .. })));
        let kv = KeyValues::parse("model = kuramoto\nbogus = 1\n").unwrap();
        assert!(ModelSpec::from_kv(&kv, Path::new(".")).is_err());
    }

    #[test]
    fn kernel_csv_round_trip() {
        let g = grid(8);
        let text = kernel_csv(g, |x, y| (x - 2.0 * y).sin());
        let table = parse_kernel_csv(&text, g).unwrap();
        assert_eq!(table.len(), 64);
        assert!((table[8 + 3] - (g.node(1) - 2.0 * g.node(3)).sin()).abs() < 1e-15);
        assert!(parse_kernel_csv(&text, grid(16)).is_err());
    }
}

//! Fields on the periodic grid `x_j = j/M` of the unit circle.
//!
//! Measures are stored as densities: node `j` carries mass `values[j] * dx`.
//! Transport distances treat that mass as an atom at `x_j`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    m: usize,
}

impl Grid {
    pub fn new(m: usize) -> Result<Self> {
        if m < 8 {
            return Err(Error::InvalidGrid(format!("need at least 8 cells, got {m}")));
        }
        Ok(Self { m })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        (j % self.m) as f64 / self.m as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.m).map(move |j| self.node(j))
    }

    /// Index of the node closest to `z` on the circle.
    pub fn nearest(&self, z: f64) -> usize {
        let j = (z.rem_euclid(1.0) * self.m as f64).round() as usize;
        j % self.m
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes().map(f).collect()
    }

    /// Errors unless `other` has the same number of cells.
    pub fn check(&self, other: &Grid) -> Result<()> {
        if self.m != other.m {
            return Err(Error::GridMismatch(self.m, other.m));
        }
        Ok(())
    }
}

/// Shortest signed displacement from `a` to `b` on the unit circle.
pub fn circle_diff(b: f64, a: f64) -> f64 {
    let d = (b - a).rem_euclid(1.0);
    if d > 0.5 {
        d - 1.0
    } else {
        d
    }
}

/// Probability density on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    grid: Grid,
    values: Vec<f64>,
}

impl GridMeasure {
    /// Validates non-negativity and unit mass.
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(grid.len(), values.len()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidMeasure(format!("density value {v}")));
        }
        let mass = integrate(&values, grid.dx());
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("mass {mass} differs from 1")));
        }
        Ok(Self { grid, values })
    }

    /// Rescales a non-negative profile to unit mass.
    pub fn normalized(grid: Grid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(grid.len(), values.len()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidMeasure(format!("density value {v}")));
        }
        let mass = integrate(&values, grid.dx());
        if mass <= 0.0 {
            return Err(Error::InvalidMeasure("zero total mass".into()));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::normalized(grid, grid.sample(f))
    }

    pub fn uniform(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![1.0; grid.len()],
        }
    }

    /// `e_j / dx`: all mass on node `j`.
    pub fn discrete_dirac(grid: Grid, j: usize) -> Self {
        let mut values = vec![0.0; grid.len()];
        values[j % grid.len()] = grid.len() as f64;
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        integrate(&self.values, self.grid.dx())
    }

    /// `(1 - eps) * self + eps * other`.
    pub fn mix(&self, other: &GridMeasure, eps: f64) -> Result<GridMeasure> {
        self.grid.check(&other.grid)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (1.0 - eps) * a + eps * b)
            .collect();
        GridMeasure::new(self.grid, values)
    }

    /// `self + sum_i w_i q_i`; must stay a probability density.
    pub fn perturbed(&self, terms: &[(f64, &SignedGridField)]) -> Result<GridMeasure> {
        let mut values = self.values.clone();
        for (w, q) in terms {
            self.grid.check(&q.grid)?;
            for (v, d) in values.iter_mut().zip(&q.values) {
                *v += w * d;
            }
        }
        GridMeasure::new(self.grid, values)
    }

    /// `self - other` as a zero-mass signed field.
    pub fn minus(&self, other: &GridMeasure) -> Result<SignedGridField> {
        self.grid.check(&other.grid)?;
        Ok(SignedGridField::new(
            self.grid,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }

    /// First circular moment `(∫cos 2πx dμ, ∫sin 2πx dμ)`.
    pub fn circular_moment(&self) -> (f64, f64) {
        let dx = self.grid.dx();
        self.grid
            .nodes()
            .zip(&self.values)
            .fold((0.0, 0.0), |(c, s), (x, v)| {
                (c + (2.0 * PI * x).cos() * v * dx, s + (2.0 * PI * x).sin() * v * dx)
            })
    }

    pub fn to_signed(&self) -> SignedGridField {
        SignedGridField::new(self.grid, self.values.clone())
    }
}

/// Signed density with its cached total integral.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedGridField {
    grid: Grid,
    values: Vec<f64>,
    total: f64,
}

impl SignedGridField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len(), "field length must match grid");
        let total = integrate(&values, grid.dx());
        Self {
            grid,
            values,
            total,
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::new(grid, vec![0.0; grid.len()])
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn total_integral(&self) -> f64 {
        self.total
    }

    pub fn scaled(&self, a: f64) -> SignedGridField {
        Self::new(self.grid, self.values.iter().map(|v| a * v).collect())
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    /// `∫ f dq` for a grid function `f`.
    pub fn pair(&self, f: &GridFunction) -> Result<f64> {
        self.grid.check(&f.grid)?;
        Ok(dot(&self.values, &f.values) * self.grid.dx())
    }
}

/// Pointwise function values on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(grid.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid function value".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.sample(f))
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `∫ f dμ`.
    pub fn integrate_against(&self, mu: &GridMeasure) -> Result<f64> {
        self.grid.check(&mu.grid)?;
        Ok(dot(&self.values, &mu.values) * self.grid.dx())
    }

    /// Periodic linear interpolation at an arbitrary point.
    pub fn interpolate(&self, x: f64) -> f64 {
        interpolate(&self.values, x)
    }

    pub fn divergence(&self) -> GridFunction {
        let mut out = vec![0.0; self.grid.len()];
        divergence_into(&self.values, self.grid.dx(), &mut out);
        Self::from_raw(self.grid, out)
    }

    pub fn laplacian(&self) -> GridFunction {
        let mut out = vec![0.0; self.grid.len()];
        laplacian_into(&self.values, self.grid.dx(), &mut out);
        Self::from_raw(self.grid, out)
    }

    pub fn gradient(&self) -> GridFunction {
        let mut out = vec![0.0; self.grid.len()];
        gradient_into(&self.values, self.grid.dx(), &mut out);
        Self::from_raw(self.grid, out)
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }
}

/// Dirac regularization width, `dx <= h <= 0.25`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelBandwidth {
    h: f64,
}

impl KernelBandwidth {
    pub fn new(h: f64, grid: Grid) -> Result<Self> {
        let min = grid.dx();
        // tolerate representation error when h is computed as a multiple of dx
        if !(h >= min * (1.0 - 1e-12) && h <= 0.25) {
            return Err(Error::Bandwidth { h, min });
        }
        Ok(Self { h })
    }

    /// `h = cells * dx`.
    pub fn cells(cells: f64, grid: Grid) -> Result<Self> {
        Self::new(cells * grid.dx(), grid)
    }

    pub fn h(&self) -> f64 {
        self.h
    }
}

/// Wrapped Gaussian of scale `h` centred at `z`, renormalized on the grid.
pub fn mollified_dirac(z: f64, h: KernelBandwidth, grid: Grid) -> GridMeasure {
    let h = h.h();
    let values: Vec<f64> = grid
        .nodes()
        .map(|x| {
            let d = circle_diff(x, z);
            (-3..=3)
                .map(|w| {
                    let u = d + w as f64;
                    (-u * u / (2.0 * h * h)).exp()
                })
                .sum()
        })
        .collect();
    let mass = integrate(&values, grid.dx());
    GridMeasure::from_raw(grid, values.into_iter().map(|v| v / mass).collect())
}

/// Circle W_1 between the atomic measures carried by the grid nodes.
pub fn wasserstein1(a: &GridMeasure, b: &GridMeasure) -> Result<f64> {
    a.grid.check(&b.grid)?;
    let dx = a.grid.dx();
    let diff = cdf_difference(&a.values, &b.values, dx);
    let mut sorted = diff.clone();
    sorted.sort_by(f64::total_cmp);
    let c = sorted[sorted.len() / 2];
    Ok(diff.iter().map(|d| (d - c).abs()).sum::<f64>() * dx)
}

pub(crate) fn cdf_difference(a: &[f64], b: &[f64], dx: f64) -> Vec<f64> {
    let mut acc = 0.0;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            acc += (x - y) * dx;
            acc
        })
        .collect()
}

/// Lower bound of `‖q‖_{-(n,∞)}` over the dictionary `{1, sin 2πjx, cos 2πjx}_{j≤J}`,
/// each element scaled to unit `W^{n,∞}` norm `Σ_{i≤n} ‖φ^{(i)}‖_∞`.
pub fn dual_sup_norm(q: &SignedGridField, n: u32, modes: usize) -> f64 {
    let grid = q.grid;
    let dx = grid.dx();
    let mut best = q.total.abs();
    for j in 1..=modes {
        let w = 2.0 * PI * j as f64;
        let norm: f64 = (0..=n).map(|i| w.powi(i as i32)).sum();
        let (mut s, mut c) = (0.0, 0.0);
        for (x, v) in grid.nodes().zip(&q.values) {
            s += (w * x).sin() * v;
            c += (w * x).cos() * v;
        }
        best = best.max((s * dx).abs() / norm).max((c * dx).abs() / norm);
    }
    best
}

/// Conservative central divergence `(f_{j+1} - f_{j-1}) / 2dx`.
pub fn divergence_into(f: &[f64], dx: f64, out: &mut [f64]) {
    let m = f.len();
    let s = 0.5 / dx;
    for j in 0..m {
        out[j] = (f[(j + 1) % m] - f[(j + m - 1) % m]) * s;
    }
}

/// Central gradient; the negative transpose of [`divergence_into`].
pub fn gradient_into(f: &[f64], dx: f64, out: &mut [f64]) {
    divergence_into(f, dx, out)
}

pub fn laplacian_into(f: &[f64], dx: f64, out: &mut [f64]) {
    let m = f.len();
    let s = 1.0 / (dx * dx);
    for j in 0..m {
        out[j] = (f[(j + 1) % m] - 2.0 * f[j] + f[(j + m - 1) % m]) * s;
    }
}

pub fn integrate(values: &[f64], dx: f64) -> f64 {
    values.iter().sum::<f64>() * dx
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sup_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Periodic piecewise-linear interpolation of node values.
pub fn interpolate(values: &[f64], x: f64) -> f64 {
    let m = values.len();
    let s = (x - x.floor()) * m as f64;
    let j = (s.floor() as usize).min(m - 1);
    let w = s - j as f64;
    (1.0 - w) * values[j] + w * values[(j + 1) % m]
}

pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with header `x,value`, one row per node.
pub fn field_csv(grid: Grid, values: &[f64]) -> String {
    let mut out = String::from("x,value\n");
    for (x, v) in grid.nodes().zip(values) {
        let _ = writeln!(out, "{},{}", fmt_float(x), fmt_float(*v));
    }
    out
}

/// Parses `x,value` rows back into node values; the row count fixes the grid.
pub fn parse_field_csv(text: &str) -> Result<(Grid, Vec<f64>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "x,value" => {}
        _ => {
            return Err(Error::Config {
                line: 1,
                msg: "expected header `x,value`".into(),
            })
        }
    }
    let mut values = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|s| s.trim().parse().ok()).ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("malformed row {line:?}"),
            })
        };
        let _x = parse(parts.next())?;
        values.push(parse(parts.next())?);
    }
    let grid = Grid::new(values.len())?;
    Ok((grid, values))
}

/// Writes through a temporary file and renames, so readers never see partial output.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(m: usize) -> Grid {
        Grid::new(m).unwrap()
    }

    /// Exhaustive circle transport: optimal shift is one of the CDF differences.
    fn w1_bruteforce(a: &GridMeasure, b: &GridMeasure) -> f64 {
        let dx = a.grid.dx();
        let diff = cdf_difference(&a.values, &b.values, dx);
        diff.iter()
            .map(|c| diff.iter().map(|d| (d - c).abs()).sum::<f64>() * dx)
            .fold(f64::INFINITY, f64::min)
    }

    fn random_measure(g: Grid, seed: &[f64]) -> GridMeasure {
        GridMeasure::from_fn(g, |x| {
            1.0 + seed
                .iter()
                .enumerate()
                .map(|(j, a)| 0.45 * a * (2.0 * PI * (j + 1) as f64 * x + j as f64).cos())
                .sum::<f64>()
                / seed.len().max(1) as f64
        })
        .unwrap()
    }

    #[test]
    fn rejects_small_grid() {
        assert!(Grid::new(7).is_err());
    }

    #[test]
    fn dirac_shift_costs_arc_length() {
        let g = grid(32);
        for s in 0..=16 {
            let a = GridMeasure::discrete_dirac(g, 3);
            let b = GridMeasure::discrete_dirac(g, 3 + s);
            let w = wasserstein1(&a, &b).unwrap();
            assert!((w - s as f64 * g.dx()).abs() < 1e-12, "s={s} w={w}");
        }
    }

    #[test]
    fn w1_of_identical_measures_is_zero() {
        let g = grid(64);
        let mu = random_measure(g, &[0.3, -0.7]);
        assert!(wasserstein1(&mu, &mu).unwrap() < 1e-15);
    }

    #[test]
    fn dual_norm_of_sine_is_one_half() {
        let g = grid(64);
        let q = SignedGridField::new(g, g.sample(|x| (2.0 * PI * x).sin()));
        for modes in 1..4 {
            assert!((dual_sup_norm(&q, 0, modes) - 0.5).abs() < 1e-12);
        }
        assert_eq!(dual_sup_norm(&SignedGridField::zeros(g), 2, 5), 0.0);
    }

    #[test]
    fn laplacian_symbol_of_cosine() {
        for m in [64, 128, 256] {
            let g = grid(m);
            let f = GridFunction::from_fn(g, |x| (2.0 * PI * x).cos()).unwrap();
            let lap = f.laplacian();
            let k2 = (2.0 * PI).powi(2);
            let err = g
                .nodes()
                .zip(lap.values())
                .map(|(x, l)| (l + k2 * (2.0 * PI * x).cos()).abs())
                .fold(0.0, f64::max);
            // 3-point symbol: k^2 (1 - k^2 dx^2 / 12 + ...)
            let expected = k2 * k2 * g.dx() * g.dx() / 12.0;
            assert!((err - expected).abs() < 0.05 * expected, "m={m} err={err}");
        }
    }

    #[test]
    fn divergence_of_constant_vanishes() {
        let g = grid(16);
        let d = GridFunction::constant(g, 3.5).divergence();
        assert!(d.sup_norm() < 1e-12);
    }

    #[test]
    fn mollified_dirac_limits_to_node_dirac() {
        let g = grid(64);
        let z = g.node(10);
        let mut errs = Vec::new();
        for cells in [4.0, 2.0, 1.0] {
            let d = mollified_dirac(z, KernelBandwidth::cells(cells, g).unwrap(), g);
            assert!((d.mass() - 1.0).abs() < 1e-12);
            let target = GridMeasure::discrete_dirac(g, 10);
            errs.push(wasserstein1(&d, &target).unwrap());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        // E|X| for a Gaussian of scale h is h·sqrt(2/π)
        let expect = g.dx() * (2.0 / std::f64::consts::PI).sqrt();
        assert!((errs[0] / (4.0 * expect) - 1.0).abs() < 0.05, "{errs:?}");
    }

    #[test]
    fn mollified_dirac_is_centred() {
        let g = grid(128);
        for z in [0.0, 0.13, 0.5, 0.97] {
            let d = mollified_dirac(z, KernelBandwidth::cells(4.0, g).unwrap(), g);
            let (c, s) = d.circular_moment();
            let angle = s.atan2(c) / (2.0 * PI);
            assert!(circle_diff(angle, z).abs() < 1e-10, "z={z} angle={angle}");
        }
    }

    #[test]
    fn bandwidth_range_enforced() {
        let g = grid(64);
        assert!(KernelBandwidth::new(g.dx() / 2.0, g).is_err());
        assert!(KernelBandwidth::new(0.3, g).is_err());
        assert!(KernelBandwidth::cells(1.0, g).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let g = grid(8);
        let vals = g.sample(|x| (x * 7.0).sin() / 3.0);
        let text = field_csv(g, &vals);
        assert!(text.starts_with("x,value\n"));
        let (g2, back) = parse_field_csv(&text).unwrap();
        assert_eq!(g2, g);
        assert_eq!(back, vals);
    }

    #[test]
    fn measure_validation() {
        let g = grid(8);
        assert!(GridMeasure::new(g, vec![1.0; 8]).is_ok());
        assert!(GridMeasure::new(g, vec![2.0; 8]).is_err());
        let mut v = vec![1.0; 8];
        v[0] = -0.5;
        v[1] = 1.5;
        assert!(GridMeasure::new(g, v).is_err());
    }

    proptest! {
        #[test]
        fn w1_matches_bruteforce(a in proptest::collection::vec(-1.0f64..1.0, 3),
                                 b in proptest::collection::vec(-1.0f64..1.0, 3),
                                 m in 8usize..33) {
            let g = grid(m);
            let mu = random_measure(g, &a);
            let nu = random_measure(g, &b);
            let w = wasserstein1(&mu, &nu).unwrap();
            prop_assert!((w - w1_bruteforce(&mu, &nu)).abs() < 1e-10);
            prop_assert!((w - wasserstein1(&nu, &mu).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn w1_triangle_inequality(a in proptest::collection::vec(-1.0f64..1.0, 3),
                                  b in proptest::collection::vec(-1.0f64..1.0, 3),
                                  c in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let g = grid(48);
            let (x, y, z) = (random_measure(g, &a), random_measure(g, &b), random_measure(g, &c));
            let lhs = wasserstein1(&x, &z).unwrap();
            let rhs = wasserstein1(&x, &y).unwrap() + wasserstein1(&y, &z).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn divergence_and_laplacian_conserve(v in proptest::collection::vec(-10.0f64..10.0, 8..64)) {
            let g = grid(v.len());
            let f = GridFunction::new(g, v).unwrap();
            let scale = f.sup_norm().max(1.0) * g.len() as f64;
            prop_assert!(integrate(f.divergence().values(), g.dx()).abs() < 1e-12 * scale);
            prop_assert!(integrate(f.laplacian().values(), g.dx()).abs() < 1e-10 * scale * g.len() as f64);
        }

        #[test]
        fn dual_norm_monotone_in_modes(v in proptest::collection::vec(-1.0f64..1.0, 16), n in 0u32..3) {
            let g = grid(16);
            let q = SignedGridField::new(g, v);
            let mut prev = 0.0;
            for modes in 1..8 {
                let d = dual_sup_norm(&q, n, modes);
                prop_assert!(d >= prev);
                prev = d;
            }
        }
    }
}

//! Recursion scheduler for the linearized hierarchies.
//!
//! Arguments are stored once as zero-mass directions `d_i = μ_i − μ` and
//! referred to by id. A solution `m^(β)` or `v^(β)` is keyed by the ordered
//! tuple of direction ids filling its slots; every index of `λ_β` maps its
//! alpha rows onto sub-tuples, which are solved once and cached.
//!
//! Forward source: `F = Σ_λ −div[m^(β̂)(α̂) · δ^n̂b(m)(m^(β_1)(α_1), …)]`.
//! Backward source: `δb(m)(m^(k))·∇v + Σ_λ δ^n̂b(m)(m^(β_1)(α_1), …)·∇v^(β̂)(α̂)`.
//! An empty tuple stands for the base flow `m` (resp. `v`).

use std::collections::HashMap;

use rayon::prelude::*;

use crate::backward::{solve_linear_backward, BackwardPath};
use crate::error::{Error, Result};
use crate::forward::{solve_linear_forward, MeasurePath, SignedPath};
use crate::models::DriftModel;
use crate::multiindex::lambda_seq;
use crate::torus::{divergence_into, gradient_into, GridMeasure, SignedGridField};

/// Initial datum of `m^(k)` for `k ≥ 2`.
///
/// Both conventions use the same sources. `Centered` starts from zero, which
/// yields the symmetric multilinear derivative `D^kU[d_1, …, d_k]`, normalized
/// in every slot. `Iterated` starts from `(−1)^{k+1}(μ_k − μ)`, which yields
/// the derivative obtained by differentiating `δ^{k−1}` once more in the base
/// measure: normalized in the last slot, and the form in which remainder
/// estimates and the backward chain hold for varying base points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    #[default]
    Centered,
    Iterated,
}

#[derive(Debug, Clone)]
struct Term {
    rows: Vec<Vec<usize>>,
    hat: Vec<usize>,
}

fn key_str(slots: &[usize]) -> String {
    format!("{slots:?}")
}

pub struct Hierarchy<'a> {
    model: &'a dyn DriftModel,
    base: &'a MeasurePath,
    convention: Convention,
    directions: Vec<Vec<f64>>,
    forward: HashMap<Vec<usize>, SignedPath>,
    v: Option<&'a BackwardPath>,
    backward: HashMap<Vec<usize>, BackwardPath>,
}

impl<'a> Hierarchy<'a> {
    pub fn new(model: &'a dyn DriftModel, base: &'a MeasurePath, convention: Convention) -> Self {
        Self {
            model,
            base,
            convention,
            directions: Vec::new(),
            forward: HashMap::new(),
            v: None,
            backward: HashMap::new(),
        }
    }

    /// Enables the backward hierarchy built on `v`.
    pub fn with_backward(mut self, v: &'a BackwardPath) -> Self {
        self.v = Some(v);
        self
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn base(&self) -> &MeasurePath {
        self.base
    }

    /// Registers a direction; returns its id.
    pub fn add_direction(&mut self, d: SignedGridField) -> Result<usize> {
        self.base.grid().check(&d.grid())?;
        self.directions.push(d.into_values());
        Ok(self.directions.len() - 1)
    }

    /// Registers `μ_i − μ` for an argument measure `μ_i`.
    pub fn add_argument(&mut self, arg: &GridMeasure) -> Result<usize> {
        let d = arg.minus(&self.base.measure(0))?;
        self.add_direction(d)
    }

    pub fn direction(&self, id: usize) -> &[f64] {
        &self.directions[id]
    }

    /// Drops every cached solution involving direction `id`.
    pub fn evict(&mut self, id: usize) {
        self.forward.retain(|k, _| !k.contains(&id));
        self.backward.retain(|k, _| !k.contains(&id));
    }

    pub fn cached_forward(&self) -> usize {
        self.forward.len()
    }

    fn terms(&self, slots: &[usize]) -> Result<Vec<Term>> {
        if let Some(&bad) = slots.iter().find(|&&s| s >= self.directions.len()) {
            return Err(Error::Parameter(format!("unknown direction id {bad}")));
        }
        let map = |row: &[usize]| -> Vec<usize> { row.iter().map(|a| slots[a - 1]).collect() };
        Ok(lambda_seq(slots.len())?
            .iter()
            .map(|lam| Term {
                rows: lam.alphas().iter().map(|r| map(r)).collect(),
                hat: map(lam.alpha_hats()),
            })
            .collect())
    }

    fn initial_datum(&self, slots: &[usize]) -> Vec<f64> {
        let k = slots.len();
        let last = &self.directions[slots[k - 1]];
        match (self.convention, k) {
            (_, 1) => last.clone(),
            (Convention::Centered, _) => vec![0.0; last.len()],
            (Convention::Iterated, _) => {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                last.iter().map(|v| sign * v).collect()
            }
        }
    }

    /// Solves and caches every sub-solution needed by `m^(k)(slots)`, but not
    /// `m^(k)` itself.
    pub fn prepare_forward(&mut self, slots: &[usize]) -> Result<()> {
        for term in self.terms(slots)? {
            if !term.hat.is_empty() {
                self.ensure_forward(&term.hat)?;
            }
            for row in &term.rows {
                self.ensure_forward(row)?;
            }
        }
        Ok(())
    }

    /// Solves and caches `m^(k)(slots)` together with its sub-solutions.
    pub fn ensure_forward(&mut self, slots: &[usize]) -> Result<()> {
        if slots.is_empty() || self.forward.contains_key(slots) {
            return Ok(());
        }
        self.prepare_forward(slots)?;
        let path = self.solve_forward(slots, true)?;
        self.forward.insert(slots.to_vec(), path);
        Ok(())
    }

    /// Fills the cache for many keys at once. Keys are solved shortest first,
    /// in parallel within each length; every key's sub-solutions must be
    /// among the keys or already cached.
    pub fn ensure_forward_all(&mut self, keys: &[Vec<usize>]) -> Result<()> {
        let longest = keys.iter().map(Vec::len).max().unwrap_or(0);
        for len in 1..=longest {
            let todo: Vec<&Vec<usize>> = keys
                .iter()
                .filter(|k| k.len() == len && !self.forward.contains_key(*k))
                .collect();
            let solved: Vec<Result<SignedPath>> = todo
                .par_iter()
                .map(|k| self.solve_forward(k, true))
                .collect();
            for (k, path) in todo.into_iter().zip(solved) {
                self.forward.insert(k.clone(), path?);
            }
        }
        Ok(())
    }

    /// Solves `m^(k)(slots)` without caching; sub-solutions must be prepared.
    /// With `keep_path = false` only the initial and final snapshots are kept.
    pub fn solve_forward(&self, slots: &[usize], keep_path: bool) -> Result<SignedPath> {
        if slots.is_empty() {
            return Err(Error::Parameter("m^(0) is the base flow".into()));
        }
        let terms = self.terms(slots)?;
        let m = self.base.grid().len();
        let mut scratch = Scratch::new(m);
        let init = self.initial_datum(slots);
        if terms.is_empty() {
            return solve_linear_forward(self.model, self.base, init, |_, _| Ok(false), keep_path);
        }
        // fail early rather than mid-integration
        for term in &terms {
            self.forward_snapshot(&term.hat, 0)?;
            for row in &term.rows {
                self.forward_snapshot(row, 0)?;
            }
        }
        solve_linear_forward(
            self.model,
            self.base,
            init,
            |n, out| {
                self.assemble_f_into(&terms, n, out, &mut scratch)?;
                Ok(true)
            },
            keep_path,
        )
    }

    pub fn forward_path(&self, slots: &[usize]) -> Result<&SignedPath> {
        self.forward
            .get(slots)
            .ok_or_else(|| Error::MissingCache(format!("forward {}", key_str(slots))))
    }

    fn forward_snapshot(&self, slots: &[usize], n: usize) -> Result<&[f64]> {
        if slots.is_empty() {
            Ok(self.base.snapshot(n))
        } else {
            Ok(self.forward_path(slots)?.snapshot(n))
        }
    }

    fn drift_derivative(&self, rows: &[Vec<usize>], n: usize, out: &mut [f64]) -> Result<()> {
        let args: Vec<&[f64]> = rows
            .iter()
            .map(|r| self.forward_snapshot(r, n))
            .collect::<Result<_>>()?;
        self.model.deriv(self.base.snapshot(n), &args, out);
        Ok(())
    }

    fn assemble_f_into(
        &self,
        terms: &[Term],
        n: usize,
        out: &mut [f64],
        s: &mut Scratch,
    ) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        if !self.model.measure_dependent() {
            return Ok(());
        }
        let dx = self.base.grid().dx();
        s.flux.iter_mut().for_each(|f| *f = 0.0);
        for term in terms {
            self.drift_derivative(&term.rows, n, &mut s.deriv)?;
            let hat = self.forward_snapshot(&term.hat, n)?;
            for ((f, d), h) in s.flux.iter_mut().zip(&s.deriv).zip(hat) {
                *f += d * h;
            }
        }
        divergence_into(&s.flux, dx, &mut s.div);
        for (o, d) in out.iter_mut().zip(&s.div) {
            *o = -d;
        }
        Ok(())
    }

    /// The assembled forward source at step `n` of `m^(k)(slots)`.
    pub fn assemble_f(&self, slots: &[usize], n: usize) -> Result<SignedGridField> {
        let terms = self.terms(slots)?;
        let m = self.base.grid().len();
        let mut out = vec![0.0; m];
        self.assemble_f_into(&terms, n, &mut out, &mut Scratch::new(m))?;
        Ok(SignedGridField::new(self.base.grid(), out))
    }

    fn v_base(&self) -> Result<&'a BackwardPath> {
        self.v
            .ok_or_else(|| Error::MissingCache("backward base solution v".into()))
    }

    /// Solves and caches `v^(k)(slots)`, `m^(k)(slots)` and all sub-solutions.
    pub fn ensure_backward(&mut self, slots: &[usize]) -> Result<()> {
        if slots.is_empty() || self.backward.contains_key(slots) {
            return Ok(());
        }
        self.v_base()?;
        self.ensure_forward(slots)?;
        for term in self.terms(slots)? {
            if !term.hat.is_empty() {
                self.ensure_backward(&term.hat)?;
            }
        }
        let path = self.solve_backward(slots)?;
        self.backward.insert(slots.to_vec(), path);
        Ok(())
    }

    /// Solves `v^(k)(slots)` without caching; `m^(k)(slots)` must be cached.
    pub fn solve_backward(&self, slots: &[usize]) -> Result<BackwardPath> {
        let v = self.v_base()?;
        if slots.is_empty() {
            return Ok(v.clone());
        }
        let terms = self.terms(slots)?;
        let own = self.forward_path(slots)?;
        for term in &terms {
            self.backward_snapshot(&term.hat, 0)?;
        }
        let m = self.base.grid().len();
        let dx = self.base.grid().dx();
        let mut s = Scratch::new(m);
        let coupled = self.model.measure_dependent();
        solve_linear_backward(self.base, vec![0.0; m], |n, _, out| {
            if !coupled {
                return Ok(false);
            }
            self.model
                .deriv(self.base.snapshot(n), &[own.snapshot(n)], &mut s.deriv);
            gradient_into(v.snapshot(n + 1), dx, &mut s.div);
            for ((o, d), g) in out.iter_mut().zip(&s.deriv).zip(&s.div) {
                *o = d * g;
            }
            for term in &terms {
                self.drift_derivative(&term.rows, n, &mut s.deriv)?;
                gradient_into(self.backward_snapshot(&term.hat, n + 1)?, dx, &mut s.div);
                for ((o, d), g) in out.iter_mut().zip(&s.deriv).zip(&s.div) {
                    *o += d * g;
                }
            }
            Ok(true)
        })
    }

    pub fn backward_path(&self, slots: &[usize]) -> Result<&BackwardPath> {
        self.backward
            .get(slots)
            .ok_or_else(|| Error::MissingCache(format!("backward {}", key_str(slots))))
    }

    fn backward_snapshot(&self, slots: &[usize], n: usize) -> Result<&[f64]> {
        if slots.is_empty() {
            Ok(self.v_base()?.snapshot(n))
        } else {
            Ok(self.backward_path(slots)?.snapshot(n))
        }
    }

    /// The `G` part of the backward source at step `n` of `v^(k)(slots)`.
    pub fn assemble_g(&self, slots: &[usize], n: usize) -> Result<Vec<f64>> {
        let terms = self.terms(slots)?;
        let m = self.base.grid().len();
        let dx = self.base.grid().dx();
        let mut s = Scratch::new(m);
        let mut out = vec![0.0; m];
        for term in &terms {
            self.drift_derivative(&term.rows, n, &mut s.deriv)?;
            gradient_into(self.backward_snapshot(&term.hat, n + 1)?, dx, &mut s.div);
            for ((o, d), g) in out.iter_mut().zip(&s.deriv).zip(&s.div) {
                *o += d * g;
            }
        }
        Ok(out)
    }
}

struct Scratch {
    flux: Vec<f64>,
    deriv: Vec<f64>,
    div: Vec<f64>,
}

impl Scratch {
    fn new(m: usize) -> Self {
        Self {
            flux: vec![0.0; m],
            deriv: vec![0.0; m],
            div: vec![0.0; m],
        }
    }
}

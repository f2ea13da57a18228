//! Nonlinear Fokker–Planck flows on the circle, their linearized Kolmogorov
//! hierarchies, and linear functional derivatives of `μ ↦ Φ(m(t; μ))`.
//!
//! Densities live on a uniform periodic grid. The forward equation
//! `∂t m + div(b(m) m) − Δm = 0` is integrated by a conservative
//! Crank–Nicolson scheme with explicit transport; the linearized forward and
//! backward equations reuse the same stencils so that discrete duality holds
//! up to `O(dt)`.

pub mod acceptance;
pub mod backward;
pub mod config;
pub mod derivative;
pub mod error;
pub mod forward;
pub mod hierarchy;
pub mod models;
pub mod multiindex;
pub mod particles;
mod scheme;
pub mod stats;
pub mod torus;

pub use backward::{solve_v, solve_v1, solve_vk, BackwardPath, TerminalData};
pub use error::{Error, Result};
pub use forward::{solve_fp, solve_m1, solve_mk, MeasurePath, SignedPath, SolveConfig};
pub use hierarchy::{Convention, Hierarchy};
pub use models::{DriftModel, ModelSpec, TestFunctional};
pub use multiindex::{DeltaIndex, TauIndex};
pub use torus::{Grid, GridFunction, GridMeasure, KernelBandwidth, SignedGridField};
pub use acceptance::{AcceptanceConfig, CheckResult, RunManifest};

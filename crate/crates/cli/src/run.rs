use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use kolmo_core::acceptance::{chaos_study, run_suite, Bound, ChaosSettings, Gate, Outcome};
use kolmo_core::backward::{solve_v, TerminalData};
use kolmo_core::config::KeyValues;
use kolmo_core::derivative::{assemble_kernel, verify_expansion, KernelOptions};
use kolmo_core::models::{kuramoto, linear_functional, ConvolutionDrift, LinearFunctional, ModelSpec};
use kolmo_core::multiindex::{capital_lambda_seq, lambda_seq};
use kolmo_core::torus::{field_csv, parse_field_csv, write_atomic};
use kolmo_core::{
    solve_fp, AcceptanceConfig, CheckResult, Error, Grid, GridFunction, GridMeasure, RunManifest,
    SolveConfig,
};

use crate::{Cli, Command, IndexClass, Problem};

pub enum Failure {
    /// Bad flags, config or input files; nothing was written.
    Usage(String),
    /// A solver or experiment aborted.
    Solver(String),
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn solver(e: Error) -> Failure {
    Failure::Solver(e.to_string())
}

type Run<T> = std::result::Result<T, Failure>;

/// Config file entries, with flags taking precedence.
struct Settings {
    kv: Option<KeyValues>,
    base: PathBuf,
}

impl Settings {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Run<Self> {
        let Some(path) = path else {
            return Ok(Self {
                kv: None,
                base: PathBuf::from("."),
            });
        };
        let kv = KeyValues::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        kv.check_keys(allowed)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        Ok(Self {
            kv: Some(kv),
            base: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Run<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Run<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match &self.kv {
            Some(kv) => kv.get(key).map_err(usage),
            None => Ok(None),
        }
    }

    fn list<T: FromStr>(&self, flag: Option<String>, key: &str, default: Vec<T>) -> Run<Vec<T>> {
        if let Some(text) = flag {
            return parse_list(&text, key);
        }
        match &self.kv {
            Some(kv) => Ok(kv.get_list(key).map_err(usage)?.unwrap_or(default)),
            None => Ok(default),
        }
    }

    /// Flag paths are taken as given; config paths are relative to the config file.
    fn path(&self, flag: Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.or_else(|| {
            self.kv
                .as_ref()
                .and_then(|kv| kv.raw(key))
                .map(|p| self.base.join(p))
        })
    }
}

fn parse_list<T: FromStr>(text: &str, key: &str) -> Run<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|_| Failure::Usage(format!("cannot parse list --{key} {text:?}")))
}

const PROBLEM_KEYS: &[&str] = &["model", "K", "M", "T", "dt", "mu0", "phi"];

struct Defaults {
    coupling: f64,
    m: usize,
    t: f64,
    dt: f64,
}

const DERIVATIVE_DEFAULTS: Defaults = Defaults {
    coupling: 5.0,
    m: 128,
    t: 0.05,
    dt: 1e-4,
};

struct Resolved {
    model: ConvolutionDrift,
    grid: Grid,
    t: f64,
    cfg: SolveConfig,
    mu0: GridMeasure,
    g: GridFunction,
    echo: String,
}

impl Resolved {
    fn phi(&self) -> LinearFunctional {
        linear_functional(&self.g)
    }
}

fn read_field(path: &Path) -> Run<(Grid, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    parse_field_csv(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn resolve(p: &Problem, s: &Settings, d: &Defaults) -> Run<Resolved> {
    let mu_path = s.path(p.mu0.clone(), "mu0");
    let phi_path = s.path(p.phi.clone(), "phi");
    let mu_field = mu_path.as_deref().map(read_field).transpose()?;
    let phi_field = phi_path.as_deref().map(read_field).transpose()?;
    let from_files = mu_field.as_ref().or(phi_field.as_ref()).map(|(g, _)| g.len());
    let m = s.get(p.m, "M", from_files.unwrap_or(d.m))?;
    let grid = Grid::new(m).map_err(usage)?;
    for (g, _) in mu_field.iter().chain(phi_field.iter()) {
        grid.check(g).map_err(usage)?;
    }
    let t = s.get(p.t, "T", d.t)?;
    let dt = s.get(p.dt, "dt", d.dt)?;
    let cfg = SolveConfig::with_dt(dt);
    cfg.validate().map_err(usage)?;
    let model_path = s.path(p.model.clone(), "model");
    let coupling = s.get(p.coupling, "K", d.coupling)?;
    let model = match &model_path {
        Some(path) => ModelSpec::read(path)
            .and_then(|spec| spec.build(grid))
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => kuramoto(grid, coupling).map_err(usage)?,
    };
    let mu0 = match mu_field {
        Some((_, v)) => GridMeasure::normalized(grid, v).map_err(usage)?,
        None => GridMeasure::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).map_err(usage)?,
    };
    let g = match phi_field {
        Some((_, v)) => GridFunction::new(grid, v).map_err(usage)?,
        None => GridFunction::from_fn(grid, |x| (2.0 * PI * x).cos()).map_err(usage)?,
    };
    let mut echo = String::new();
    match &model_path {
        Some(path) => {
            let _ = writeln!(echo, "model = {}", path.display());
        }
        None => {
            let _ = writeln!(echo, "model = kuramoto\nK = {coupling}");
        }
    }
    let show = |p: &Option<PathBuf>, dflt: &str| p.as_ref().map_or(dflt.to_string(), |p| p.display().to_string());
    let _ = write!(
        echo,
        "M = {m}\nT = {t}\ndt = {dt}\nmu0 = {}\nphi = {}\n",
        show(&mu_path, "1 + 0.5 cos(2 pi x)"),
        show(&phi_path, "cos(2 pi x)")
    );
    Ok(Resolved {
        model,
        grid,
        t,
        cfg,
        mu0,
        g,
        echo,
    })
}

fn check(title: &'static str, start: Instant, out: std::result::Result<Outcome, Error>) -> Run<CheckResult> {
    let (gates, artifacts) = out.map_err(solver)?;
    Ok(CheckResult {
        criterion: 0,
        title,
        gates,
        artifacts,
        elapsed: start.elapsed(),
        error: None,
    })
}

fn finish(out_dir: &Path, command: &str, config: String, start: Instant, results: Vec<CheckResult>) -> Run<bool> {
    for r in &results {
        for (name, contents) in &r.artifacts {
            write_atomic(&out_dir.join(name), contents).map_err(solver)?;
        }
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock: start.elapsed(),
        results,
    };
    write_atomic(&out_dir.join("manifest.txt"), &manifest.render()).map_err(solver)?;
    for r in &manifest.results {
        println!("{}", r.summary());
    }
    Ok(manifest.passed())
}

pub fn run(cli: Cli) -> Run<bool> {
    let start = Instant::now();
    let config = cli.config.as_deref();
    let out = cli.out.as_path();
    match cli.command {
        Command::Forward(p) => {
            let s = Settings::load(config, PROBLEM_KEYS)?;
            let r = resolve(&p, &s, &DERIVATIVE_DEFAULTS)?;
            let res = (|| {
                let path = solve_fp(&r.model, &r.mu0, r.t, &r.cfg)?;
                let last = path.final_measure();
                let drift = (last.mass() - r.mu0.mass()).abs();
                let min = last.values().iter().copied().fold(f64::INFINITY, f64::min);
                Ok((
                    vec![
                        Gate::new("mass drift", drift, Bound::Below(1e-10)),
                        Gate::new("minimum density", min, Bound::AtLeast(0.0)),
                    ],
                    vec![("forward.csv".to_string(), field_csv(r.grid, last.values()))],
                ))
            })();
            let c = check("forward solve", start, res)?;
            finish(out, "forward", r.echo, start, vec![c])
        }
        Command::Backward(p) => {
            let s = Settings::load(config, PROBLEM_KEYS)?;
            let r = resolve(&p, &s, &DERIVATIVE_DEFAULTS)?;
            let res = (|| {
                let base = solve_fp(&r.model, &r.mu0, r.t, &r.cfg)?;
                let v = solve_v(&r.model, &base, &TerminalData { xi: r.g.clone(), t: base.final_time() })?;
                let v0 = v.initial();
                let finite = v0.values().iter().all(|x| x.is_finite());
                Ok((
                    vec![Gate::holds("v(0) finite", finite)],
                    vec![("backward.csv".to_string(), field_csv(r.grid, v0.values()))],
                ))
            })();
            let c = check("backward solve", start, res)?;
            finish(out, "backward", r.echo, start, vec![c])
        }
        Command::DualityCheck(p) => {
            let s = Settings::load(config, PROBLEM_KEYS)?;
            let d = Defaults {
                coupling: 1.0,
                m: 256,
                t: 0.25,
                dt: 1e-4,
            };
            let r = resolve(&p, &s, &d)?;
            let res = (|| {
                let base = solve_fp(&r.model, &r.mu0, r.t, &r.cfg)?;
                let lhs = r.g.integrate_against(&base.final_measure())?;
                let v = solve_v(&r.model, &base, &TerminalData { xi: r.g.clone(), t: base.final_time() })?;
                let rhs = v.initial().integrate_against(&r.mu0)?;
                let diff = (lhs - rhs).abs();
                let csv = format!("quantity,value\nforward,{lhs:.16e}\nbackward,{rhs:.16e}\ndifference,{diff:.16e}\n");
                Ok((
                    vec![Gate::new("|<xi, m(t)> - <v(0), mu>|", diff, Bound::Below(1e-6))],
                    vec![("duality.csv".to_string(), csv)],
                ))
            })();
            let c = check("duality identity", start, res)?;
            finish(out, "duality-check", r.echo, start, vec![c])
        }
        Command::Derivative { problem, k, stride } => {
            let mut keys = PROBLEM_KEYS.to_vec();
            keys.extend(["k", "stride"]);
            let s = Settings::load(config, &keys)?;
            let r = resolve(&problem, &s, &DERIVATIVE_DEFAULTS)?;
            let k = s.get(k, "k", 1)?;
            let stride = s.get(stride, "stride", if k == 1 { 1 } else { 4 })?;
            let opts = KernelOptions::default().with_stride(stride);
            let echo = format!("{}k = {k}\nstride = {stride}\n", r.echo);
            let res = (|| {
                let kernel = assemble_kernel(k, &r.model, &r.phi(), r.t, &r.mu0, &opts, &r.cfg)?;
                let tol = if k == 1 { 1e-6 } else { 1e-4 };
                let mut gates = vec![Gate::new("normalization residual", kernel.normalization_residual(), Bound::Below(tol))];
                if k >= 2 {
                    gates.push(Gate::new("max asymmetry", kernel.asymmetry(), Bound::Below(1e-4)));
                }
                Ok((gates, vec![(format!("kernel_k{k}.csv"), kernel.to_csv())]))
            })();
            let c = check("derivative kernel", start, res)?;
            finish(out, "derivative", echo, start, vec![c])
        }
        Command::VerifyExpansion { problem, k, eps, mu_hat } => {
            let mut keys = PROBLEM_KEYS.to_vec();
            keys.extend(["k", "eps", "mu_hat"]);
            let s = Settings::load(config, &keys)?;
            let r = resolve(&problem, &s, &DERIVATIVE_DEFAULTS)?;
            let k = s.get(k, "k", 1)?;
            if !(1..=2).contains(&k) {
                return Err(Failure::Usage(format!("verify-expansion supports k = 1, 2 (got {k})")));
            }
            let eps: Vec<f64> = s.list(eps, "eps", vec![0.2, 0.1, 0.05, 0.025])?;
            let hat_path = s.path(mu_hat, "mu_hat");
            let hat = match &hat_path {
                Some(path) => {
                    let (g, v) = read_field(path)?;
                    r.grid.check(&g).map_err(usage)?;
                    GridMeasure::normalized(r.grid, v).map_err(usage)?
                }
                None => GridMeasure::from_fn(r.grid, |x| 1.0 + 0.8 * (2.0 * PI * x).sin()).map_err(usage)?,
            };
            let eps_text: Vec<String> = eps.iter().map(|e| e.to_string()).collect();
            let echo = format!(
                "{}k = {k}\neps = {}\nmu_hat = {}\n",
                r.echo,
                eps_text.join(","),
                hat_path.map_or("1 + 0.8 sin(2 pi x)".into(), |p| p.display().to_string())
            );
            let res = (|| {
                let sweep = verify_expansion(k, &r.model, &r.phi(), r.t, &r.mu0, &hat, &eps, &KernelOptions::default(), &r.cfg)?;
                let target = (k + 1) as f64;
                Ok((
                    vec![Gate::new("remainder slope in eps", sweep.slope, Bound::Within { target, tol: 0.2 * k as f64 })],
                    vec![(format!("expansion_k{k}.csv"), sweep.to_csv())],
                ))
            })();
            let c = check("expansion remainder", start, res)?;
            finish(out, "verify-expansion", echo, start, vec![c])
        }
        Command::Chaos { problem, ns, reps, seed } => {
            let mut keys = PROBLEM_KEYS.to_vec();
            keys.extend(["Ns", "reps", "seed", "recheck_reps"]);
            let s = Settings::load(config, &keys)?;
            let dflt = ChaosSettings::default();
            let d = Defaults {
                coupling: dflt.coupling,
                m: dflt.grid,
                t: dflt.t,
                dt: dflt.dt,
            };
            let r = resolve(&problem, &s, &d)?;
            let settings = ChaosSettings {
                coupling: s.get(problem.coupling, "K", dflt.coupling)?,
                grid: r.grid.len(),
                ns: s.list(ns, "Ns", dflt.ns.clone())?,
                reps: s.get(reps, "reps", dflt.reps)?,
                t: r.t,
                dt: r.cfg.dt,
                recheck_reps: 0,
            };
            let seed = s.get(seed, "seed", AcceptanceConfig::default().seed)?;
            if settings.ns.len() < 2 || settings.ns.contains(&0) || settings.reps < 2 {
                return Err(Failure::Usage("need at least two positive particle counts and two replications".into()));
            }
            let ns: Vec<String> = settings.ns.iter().map(|n| n.to_string()).collect();
            let echo = format!("{}Ns = {}\nreps = {}\nseed = {seed}\n", r.echo, ns.join(","), settings.reps);
            let res = chaos_study(&r.model, &r.phi(), &r.mu0, None, &settings, seed);
            let c = check("propagation of chaos", start, res)?;
            finish(out, "chaos", echo, start, vec![c])
        }
        Command::Multiindex { class, k } => {
            let s = Settings::load(config, &["class", "k"])?;
            let class = match class {
                Some(c) => c,
                None => match s.kv.as_ref().and_then(|kv| kv.raw("class")) {
                    None | Some("delta") => IndexClass::Delta,
                    Some("tau") => IndexClass::Tau,
                    Some(other) => return Err(Failure::Usage(format!("unknown class {other:?}"))),
                },
            };
            let k = s.get(k, "k", 2)?;
            let lines: Vec<String> = match class {
                IndexClass::Tau => lambda_seq(k).map_err(usage)?.iter().map(|l| l.to_string()).collect(),
                IndexClass::Delta => capital_lambda_seq(k).map_err(usage)?.iter().map(|l| l.to_string()).collect(),
            };
            let name = match class {
                IndexClass::Tau => "tau",
                IndexClass::Delta => "delta",
            };
            let mut text = String::new();
            for l in &lines {
                println!("{l}");
                let _ = writeln!(text, "{l}");
            }
            write_atomic(&out.join(format!("multiindex_{name}_k{k}.txt")), &text).map_err(solver)?;
            let manifest = RunManifest {
                command: "multiindex".into(),
                config: format!("class = {name}\nk = {k}\ncount = {}\n", lines.len()),
                version: env!("CARGO_PKG_VERSION").to_string(),
                wall_clock: start.elapsed(),
                results: Vec::new(),
            };
            write_atomic(&out.join("manifest.txt"), &manifest.render()).map_err(solver)?;
            Ok(true)
        }
        Command::Accept { seed, only } => {
            let s = Settings::load(config, &["seed", "K", "M", "Ns", "reps", "T", "dt", "recheck_reps", "only"])?;
            let d = AcceptanceConfig::default();
            let only: Vec<u8> = match only {
                Some(text) => parse_list(&text, "only")?,
                None => s.list(None, "only", Vec::new())?,
            };
            if let Some(bad) = only.iter().find(|c| !(1..=12).contains(*c)) {
                return Err(Failure::Usage(format!("no criterion {bad}")));
            }
            let c = &d.chaos;
            let cfg = AcceptanceConfig {
                seed: s.get(seed, "seed", d.seed)?,
                chaos: ChaosSettings {
                    coupling: s.get(None, "K", c.coupling)?,
                    grid: s.get(None, "M", c.grid)?,
                    ns: s.list(None, "Ns", c.ns.clone())?,
                    reps: s.get(None, "reps", c.reps)?,
                    t: s.get(None, "T", c.t)?,
                    dt: s.get(None, "dt", c.dt)?,
                    recheck_reps: s.get(None, "recheck_reps", c.recheck_reps)?,
                },
                only,
            };
            let results = run_suite(&cfg, |r| println!("{}", r.summary()));
            let mut all = Vec::new();
            for r in &results {
                for (name, contents) in &r.artifacts {
                    write_atomic(&out.join(name), contents).map_err(solver)?;
                }
                all.push(r.clone());
            }
            let manifest = RunManifest {
                command: "accept".into(),
                config: cfg.echo(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                wall_clock: start.elapsed(),
                results: all,
            };
            write_atomic(&out.join("manifest.txt"), &manifest.render()).map_err(solver)?;
            Ok(manifest.passed())
        }
    }
}

//! Backward Euler for BSDEs along a forward bundle.
//!
//! With `E_k` the one-step conditional expectation,
//!
//! ```text
//! z_k = E_k[y_{k+1} ΔB_k] / Δt
//! y_k = E_k[y_{k+1}] + g(t_k, x_k, E_k[y_{k+1}], z_k) Δt
//! ```
//!
//! On a lattice `E_k` is the exact average over the `2^d` children. On
//! Gaussian paths it is a weighted least-squares regression on monomials of
//! the state. The implicit variant replaces the `y` argument of `g` by `y_k`
//! and solves the fixed point by a few Picard sweeps.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::model::{ControlGrid, GameSpec};
use crate::sde_sim::{simulate, simulate_lattice, BundleKind, ControlProcess, NoiseModel, PathBundle, TimeGrid};
use crate::FORMAT_HEADER;

const PICARD_ITERATIONS: usize = 5;
const PICARD_TOL: f64 = 1e-12;

/// Arguments handed to a driver at one node.
#[derive(Debug, Clone, Copy)]
pub struct DriverPoint<'a> {
    pub step: usize,
    pub node: usize,
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    /// Control indices applied at the node.
    pub u: usize,
    pub v: usize,
}

pub type CustomDriver<'a> = &'a (dyn Fn(&DriverPoint) -> f64 + Sync);

#[derive(Clone, Copy)]
pub enum Driver<'a> {
    /// The game driver `f(t, x, y, z, u, v)` with the bundle's controls.
    Game,
    Custom(CustomDriver<'a>),
}

impl Driver<'_> {
    fn eval(&self, spec: &GameSpec, controls: &ControlGrid, p: &DriverPoint) -> Result<f64> {
        match self {
            Driver::Game => spec.driver_at(p.t, p.x, p.y, p.z, controls.u(p.u), controls.v(p.v)),
            Driver::Custom(g) => Ok(g(p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsdeOptions {
    pub scheme: Scheme,
    /// Total degree of the regression basis on Gaussian bundles.
    pub basis_degree: u32,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        BsdeOptions { scheme: Scheme::Explicit, basis_degree: 2 }
    }
}

/// Terminal values, one per path or last-level lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalData(pub Vec<f64>);

impl TerminalData {
    pub fn from_fn(bundle: &PathBundle, f: impl Fn(&[f64]) -> f64) -> Self {
        let n = bundle.grid.steps;
        TerminalData((0..bundle.width(n)).map(|i| f(bundle.state(n, i))).collect())
    }

    /// `Φ(x_N)`.
    pub fn terminal_payoff(spec: &GameSpec, bundle: &PathBundle) -> Result<Self> {
        let n = bundle.grid.steps;
        (0..bundle.width(n))
            .map(|i| spec.terminal_at(bundle.state(n, i)))
            .collect::<Result<Vec<_>>>()
            .map(TerminalData)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    /// `y[k][node]`.
    pub y: Vec<Vec<f64>>,
    /// `z[k][node * d + j]`, for `k < N`.
    pub z: Vec<Vec<f64>>,
    pub dim_noise: usize,
    pub scheme: Scheme,
    /// Number of regression basis functions (Gaussian bundles only).
    pub basis_size: Option<usize>,
}

impl BsdeSolution {
    pub fn root_values(&self) -> &[f64] {
        &self.y[0]
    }

    pub fn z_at(&self, step: usize, node: usize) -> &[f64] {
        let d = self.dim_noise;
        &self.z[step][node * d..(node + 1) * d]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{FORMAT_HEADER}")?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["step".to_string(), "node".into(), "y".into()];
        header.extend((0..self.dim_noise).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        for (k, ys) in self.y.iter().enumerate() {
            for (i, y) in ys.iter().enumerate() {
                let mut row = vec![k.to_string(), i.to_string(), y.to_string()];
                if k < self.z.len() {
                    row.extend(self.z_at(k, i).iter().map(|z| z.to_string()));
                } else {
                    row.extend((0..self.dim_noise).map(|_| String::new()));
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `y = ey + g(y) Δt`, explicit or by Picard iteration from the explicit value.
#[allow(clippy::too_many_arguments)]
fn one_step(
    spec: &GameSpec,
    controls: &ControlGrid,
    driver: &Driver,
    scheme: Scheme,
    dt: f64,
    mut point: DriverPoint,
    ey: f64,
) -> Result<f64> {
    point.y = ey;
    let mut y = ey + driver.eval(spec, controls, &point)? * dt;
    if scheme == Scheme::Implicit {
        for _ in 0..PICARD_ITERATIONS {
            point.y = y;
            let next = ey + driver.eval(spec, controls, &point)? * dt;
            let done = (next - y).abs() <= PICARD_TOL * (1.0 + y.abs());
            y = next;
            if done {
                break;
            }
        }
    }
    Ok(y)
}

/// Solves the BSDE with terminal `ξ` along the bundle.
pub fn solve_backward(
    spec: &GameSpec,
    controls: &ControlGrid,
    bundle: &PathBundle,
    terminal: &TerminalData,
    driver: Driver,
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    let steps = bundle.grid.steps;
    if terminal.0.len() != bundle.width(steps) {
        return Err(LabError::invalid(format!(
            "terminal data has {} entries, bundle has {} terminal nodes",
            terminal.0.len(),
            bundle.width(steps)
        )));
    }
    if let Some(i) = terminal.0.iter().position(|v| !v.is_finite()) {
        return Err(LabError::NonFinite { step: steps, node: i });
    }
    let mut y = vec![Vec::new(); steps + 1];
    let mut z = vec![Vec::new(); steps];
    y[steps] = terminal.0.clone();
    let mut basis_size = None;
    for k in (0..steps).rev() {
        let (yk, zk) = match &bundle.kind {
            BundleKind::Lattice(_) => lattice_step(spec, controls, bundle, &driver, opts, k, &y[k + 1])?,
            BundleKind::Paths(_) => {
                let (yk, zk, p) = regression_step(spec, controls, bundle, &driver, opts, k, &y[k + 1])?;
                basis_size = Some(basis_size.unwrap_or(0).max(p));
                (yk, zk)
            }
        };
        y[k] = yk;
        z[k] = zk;
    }
    Ok(BsdeSolution { y, z, dim_noise: bundle.dim_noise, scheme: opts.scheme, basis_size })
}

fn lattice_step(
    spec: &GameSpec,
    controls: &ControlGrid,
    bundle: &PathBundle,
    driver: &Driver,
    opts: &BsdeOptions,
    k: usize,
    next: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let lattice = bundle.lattice().expect("lattice bundle");
    let d = bundle.dim_noise;
    let dt = bundle.grid.dt();
    let t = bundle.grid.t(k);
    let inv_b = 1.0 / lattice.branching() as f64;
    let rows: Vec<Result<(f64, Vec<f64>)>> = lattice.levels[k]
        .par_iter()
        .enumerate()
        .map(|(i, node)| {
            let mut ey = 0.0;
            let mut ez = vec![0.0; d];
            for (c, &child) in node.children.iter().enumerate() {
                let yc = next[child];
                ey += yc;
                for (zj, db) in ez.iter_mut().zip(&lattice.branch_increments[c]) {
                    *zj += yc * db;
                }
            }
            ey *= inv_b;
            for zj in ez.iter_mut() {
                *zj *= inv_b / dt;
            }
            let (u, v) = node.controls.expect("inner lattice node has controls");
            let point = DriverPoint { step: k, node: i, t, x: &node.x, y: ey, z: &ez, u, v };
            let yk = one_step(spec, controls, driver, opts.scheme, dt, point, ey)?;
            if !yk.is_finite() {
                return Err(LabError::DriverBlowUp { step: k });
            }
            Ok((yk, ez))
        })
        .collect();
    let mut yk = Vec::with_capacity(rows.len());
    let mut zk = Vec::with_capacity(rows.len() * d);
    for r in rows {
        let (y, z) = r?;
        yk.push(y);
        zk.extend(z);
    }
    Ok((yk, zk))
}

/// Exponent vectors of all monomials in `n` variables of total degree ≤ `deg`.
pub fn monomial_exponents(n: usize, deg: u32) -> Vec<Vec<u32>> {
    fn rec(n: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(n, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, deg, &mut Vec::with_capacity(n), &mut out);
    out.sort_by_key(|e| e.iter().sum::<u32>());
    out
}

#[allow(clippy::type_complexity)]
fn regression_step(
    spec: &GameSpec,
    controls: &ControlGrid,
    bundle: &PathBundle,
    driver: &Driver,
    opts: &BsdeOptions,
    k: usize,
    next: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let set = bundle.paths().expect("gaussian bundle");
    let (n, d, m) = (bundle.dim_state, bundle.dim_noise, set.paths);
    let steps = bundle.grid.steps;
    let dt = bundle.grid.dt();
    let t = bundle.grid.t(k);
    let w = &set.weights;
    let inc = |q: usize| &set.increments[(q * steps + k) * d..(q * steps + k + 1) * d];

    // targets: y_{k+1} and y_{k+1} ΔB_j / Δt
    let targets: Vec<Vec<f64>> = std::iter::once(next.to_vec())
        .chain((0..d).map(|j| (0..m).map(|q| next[q] * inc(q)[j] / dt).collect()))
        .collect();

    let first = bundle.state(k, 0);
    let identical = (0..m).all(|q| bundle.state(k, q) == first);
    let (fitted, p): (Vec<Vec<f64>>, usize) = if identical {
        let means = targets.iter().map(|tg| tg.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>();
        (means.iter().map(|&mu| vec![mu; m]).collect(), 1)
    } else {
        let exps = monomial_exponents(n, opts.basis_degree);
        let p = exps.len();
        // centre and scale each coordinate for conditioning
        let mut mean = vec![0.0; n];
        let mut scale = vec![0.0; n];
        for q in 0..m {
            for (i, xi) in bundle.state(k, q).iter().enumerate() {
                mean[i] += w[q] * xi;
            }
        }
        for q in 0..m {
            for (i, xi) in bundle.state(k, q).iter().enumerate() {
                scale[i] += w[q] * (xi - mean[i]).powi(2);
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let features = |q: usize| -> Vec<f64> {
            let x = bundle.state(k, q);
            exps.iter()
                .map(|e| e.iter().enumerate().map(|(i, &p)| ((x[i] - mean[i]) / scale[i]).powi(p as i32)).product())
                .collect()
        };
        let mut a = DMatrix::<f64>::zeros(m, p);
        for q in 0..m {
            let sw = w[q].sqrt();
            for (c, f) in features(q).into_iter().enumerate() {
                a[(q, c)] = sw * f;
            }
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = smax * 1e-10 * (m.max(p) as f64);
        let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        if rank < p {
            return Err(LabError::DegenerateBasis { step: k, rank, columns: p });
        }
        let mut fitted = Vec::with_capacity(targets.len());
        for tg in &targets {
            let b = DVector::from_iterator(m, tg.iter().zip(w).map(|(v, wq)| v * wq.sqrt()));
            let coef = svd.solve(&b, eps).map_err(|e| LabError::invalid(e.to_string()))?;
            let vals = (0..m)
                .map(|q| features(q).iter().zip(coef.iter()).map(|(f, c)| f * c).sum())
                .collect();
            fitted.push(vals);
        }
        (fitted, p)
    };

    let mut yk = vec![0.0; m];
    let mut zk = vec![0.0; m * d];
    let results: Vec<Result<f64>> = (0..m)
        .into_par_iter()
        .map(|q| {
            let zq: Vec<f64> = (0..d).map(|j| fitted[j + 1][q]).collect();
            let (u, v) = bundle.controls(k, q);
            let point = DriverPoint { step: k, node: q, t, x: bundle.state(k, q), y: 0.0, z: &zq, u, v };
            let y = one_step(spec, controls, driver, opts.scheme, dt, point, fitted[0][q])?;
            if !y.is_finite() {
                return Err(LabError::DriverBlowUp { step: k });
            }
            Ok(y)
        })
        .collect();
    for (q, r) in results.into_iter().enumerate() {
        yk[q] = r?;
        for j in 0..d {
            zk[q * d + j] = fitted[j + 1][q];
        }
    }
    Ok((yk, zk, p))
}

/// Backward semigroup `G_{t,t+δ}[η]`: the solution at the initial node(s) of
/// a bundle spanning `[t, t+δ]`, one entry per root (lattice) or path.
pub fn semigroup_g(
    spec: &GameSpec,
    controls: &ControlGrid,
    bundle: &PathBundle,
    eta: &TerminalData,
    driver: Driver,
    opts: &BsdeOptions,
) -> Result<Vec<f64>> {
    Ok(solve_backward(spec, controls, bundle, eta, driver, opts)?.y.swap_remove(0))
}

/// `J(t0, x0; u, v) = Y_{t0}` with terminal `Φ(x_N)`.
#[allow(clippy::too_many_arguments)]
pub fn cost_j(
    spec: &GameSpec,
    controls: &ControlGrid,
    grid: &TimeGrid,
    noise: &NoiseModel,
    x0: &[f64],
    u: &dyn ControlProcess,
    v: &dyn ControlProcess,
    opts: &BsdeOptions,
) -> Result<f64> {
    let bundle = simulate(spec, controls, grid, noise, x0, u, v)?;
    let xi = TerminalData::terminal_payoff(spec, &bundle)?;
    let sol = solve_backward(spec, controls, &bundle, &xi, Driver::Game, opts)?;
    let w = bundle.weights(0);
    Ok(sol.y[0].iter().zip(&w).map(|(y, w)| y * w).sum())
}

/// One side of a comparison or stability pair.
#[derive(Clone, Copy)]
pub struct Instance<'a> {
    pub terminal: &'a TerminalData,
    pub driver: Driver<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub passed: bool,
    /// `min (y¹ − y² + tol)` over all nodes; negative means a violation.
    pub worst_margin: f64,
    /// Node with the smallest `y¹ − y²`.
    pub witness: (usize, usize),
    /// Root gap `y¹₀ − y²₀` (weighted over roots or paths).
    pub root_gap: f64,
    pub lattice: bool,
}

/// Solves both instances on the same bundle and checks `y¹ ≥ y² − tol`
/// everywhere, after checking `ξ₁ ≥ ξ₂` and `g₁ ≥ g₂` along solution 2.
pub fn comparison_oracle(
    spec: &GameSpec,
    controls: &ControlGrid,
    bundle: &PathBundle,
    first: Instance,
    second: Instance,
    opts: &BsdeOptions,
) -> Result<ComparisonReport> {
    let steps = bundle.grid.steps;
    for (i, (a, b)) in first.terminal.0.iter().zip(&second.terminal.0).enumerate() {
        if a < b {
            return Err(LabError::Precondition(format!("ξ₁ < ξ₂ at terminal node {i}: {a} < {b}")));
        }
    }
    let s1 = solve_backward(spec, controls, bundle, first.terminal, first.driver, opts)?;
    let s2 = solve_backward(spec, controls, bundle, second.terminal, second.driver, opts)?;
    for k in 0..steps {
        for i in 0..bundle.width(k) {
            let (u, v) = bundle.controls(k, i);
            let p = DriverPoint {
                step: k,
                node: i,
                t: bundle.grid.t(k),
                x: bundle.state(k, i),
                y: s2.y[k][i],
                z: s2.z_at(k, i),
                u,
                v,
            };
            let g1 = first.driver.eval(spec, controls, &p)?;
            let g2 = second.driver.eval(spec, controls, &p)?;
            if g1 < g2 {
                return Err(LabError::Precondition(format!("g₁ < g₂ at step {k}, node {i}: {g1} < {g2}")));
            }
        }
    }
    let lattice = bundle.is_lattice();
    let mut worst = (f64::INFINITY, (0, 0));
    let mut worst_margin = f64::INFINITY;
    for k in 0..=steps {
        let diffs: Vec<f64> = s1.y[k].iter().zip(&s2.y[k]).map(|(a, b)| a - b).collect();
        let tol = if lattice { 1e-10 } else { 3.0 * standard_error(&diffs, &bundle.weights(k)) };
        for (i, &dy) in diffs.iter().enumerate() {
            if dy < worst.0 {
                worst = (dy, (k, i));
            }
            worst_margin = worst_margin.min(dy + tol);
        }
    }
    let w0 = bundle.weights(0);
    let root_gap = s1.y[0].iter().zip(&s2.y[0]).zip(&w0).map(|((a, b), w)| (a - b) * w).sum();
    Ok(ComparisonReport { passed: worst_margin >= 0.0, worst_margin, witness: worst.1, root_gap, lattice })
}

fn standard_error(vals: &[f64], w: &[f64]) -> f64 {
    let mean: f64 = vals.iter().zip(w).map(|(v, w)| v * w).sum();
    let var: f64 = vals.iter().zip(w).map(|(v, w)| w * (v - mean).powi(2)).sum();
    (var / vals.len() as f64).sqrt()
}

/// Drivers `g + φᵢ` sharing the base `g`; `phi[k][node]` for `k < N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedInstance {
    pub terminal: TerminalData,
    pub phi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub passed: bool,
    pub beta: f64,
    /// `|y¹ − y²|²` and the bound at the root (weighted over roots/paths).
    pub root_lhs: f64,
    pub root_bound: f64,
    /// Smallest `bound − lhs` over all checked nodes.
    pub worst_slack: f64,
    pub witness: (usize, usize),
}

/// A-priori estimate with `β = 16(1 + C²)`. On a lattice the conditional form
/// is checked at every node; on Gaussian paths only at the root.
pub fn stability_estimate_check(
    spec: &GameSpec,
    controls: &ControlGrid,
    bundle: &PathBundle,
    base: Driver,
    first: &PerturbedInstance,
    second: &PerturbedInstance,
    opts: &BsdeOptions,
) -> Result<StabilityReport> {
    let steps = bundle.grid.steps;
    for inst in [first, second] {
        if inst.phi.len() != steps || (0..steps).any(|k| inst.phi[k].len() != bundle.width(k)) {
            return Err(LabError::invalid("perturbation shape does not match the bundle"));
        }
    }
    let c = spec.lipschitz_const;
    let beta = 16.0 * (1.0 + c * c);
    let dt = bundle.grid.dt();
    let solve = |inst: &PerturbedInstance| {
        let g = |p: &DriverPoint| -> f64 {
            let b = match base {
                Driver::Game => spec
                    .driver_at(p.t, p.x, p.y, p.z, controls.u(p.u), controls.v(p.v))
                    .unwrap_or(f64::NAN),
                Driver::Custom(f) => f(p),
            };
            b + inst.phi[p.step][p.node]
        };
        solve_backward(spec, controls, bundle, &inst.terminal, Driver::Custom(&g), opts)
    };
    let s1 = solve(first)?;
    let s2 = solve(second)?;
    let growth = (beta * dt).exp();

    let mut worst = (f64::INFINITY, (0, 0));
    let (root_lhs, root_bound) = match &bundle.kind {
        BundleKind::Lattice(l) => {
            let mut a: Vec<f64> = first.terminal.0.iter().zip(&second.terminal.0).map(|(p, q)| (p - q).powi(2)).collect();
            check_level(&s1.y[steps], &s2.y[steps], &a, steps, &mut worst);
            for k in (0..steps).rev() {
                let inv_b = 1.0 / l.branching() as f64;
                a = l.levels[k]
                    .iter()
                    .enumerate()
                    .map(|(i, node)| {
                        let ea: f64 = node.children.iter().map(|&c| a[c]).sum::<f64>() * inv_b;
                        growth * ea + (first.phi[k][i] - second.phi[k][i]).powi(2) * dt
                    })
                    .collect();
                check_level(&s1.y[k], &s2.y[k], &a, k, &mut worst);
            }
            let w0 = bundle.weights(0);
            let lhs = s1.y[0].iter().zip(&s2.y[0]).zip(&w0).map(|((p, q), w)| w * (p - q).powi(2)).sum();
            let bound = a.iter().zip(&w0).map(|(a, w)| a * w).sum();
            (lhs, bound)
        }
        BundleKind::Paths(p) => {
            let horizon = bundle.grid.t1 - bundle.grid.t0;
            let mut bound = 0.0;
            for q in 0..p.paths {
                let mut acc = (beta * horizon).exp() * (first.terminal.0[q] - second.terminal.0[q]).powi(2);
                for k in 0..steps {
                    acc += (beta * k as f64 * dt).exp() * (first.phi[k][q] - second.phi[k][q]).powi(2) * dt;
                }
                bound += p.weights[q] * acc;
            }
            let w0 = &p.weights;
            let dy: f64 = s1.y[0].iter().zip(&s2.y[0]).zip(w0).map(|((a, b), w)| (a - b) * w).sum();
            let lhs = dy * dy;
            worst = (bound - lhs, (0, 0));
            (lhs, bound)
        }
    };
    Ok(StabilityReport {
        passed: worst.0 >= -1e-12,
        beta,
        root_lhs,
        root_bound,
        worst_slack: worst.0,
        witness: worst.1,
    })
}

fn check_level(y1: &[f64], y2: &[f64], bound: &[f64], k: usize, worst: &mut (f64, (usize, usize))) {
    for (i, ((a, b), c)) in y1.iter().zip(y2).zip(bound).enumerate() {
        let slack = c - (a - b).powi(2);
        if slack < worst.0 {
            *worst = (slack, (k, i));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub passed: bool,
    /// Root values of the mixed lattice, one per partition cell.
    pub mixed_roots: Vec<f64>,
    /// Root values of the separate single-point solves.
    pub separate_roots: Vec<f64>,
    pub mixed_value: f64,
    pub mixture_of_separate: f64,
    pub max_discrepancy: f64,
}

/// Compares the solution started from the mixed initial law `Σ qᵢ δ_{xᵢ}`
/// with the separate solves from each `xᵢ`, on the lattice.
#[allow(clippy::too_many_arguments)]
pub fn partition_mixing_check(
    spec: &GameSpec,
    controls: &ControlGrid,
    grid: &TimeGrid,
    partition: &[(Vec<f64>, f64)],
    u: &dyn ControlProcess,
    v: &dyn ControlProcess,
    driver: Driver,
    node_budget: usize,
    opts: &BsdeOptions,
) -> Result<PartitionReport> {
    let solve_roots = |roots: &[(Vec<f64>, f64)]| -> Result<Vec<f64>> {
        let bundle = simulate_lattice(spec, controls, grid, roots, u, v, node_budget)?;
        let xi = TerminalData::terminal_payoff(spec, &bundle)?;
        Ok(solve_backward(spec, controls, &bundle, &xi, driver, opts)?.y.swap_remove(0))
    };
    let mixed_roots = solve_roots(partition)?;
    let separate_roots = partition
        .iter()
        .map(|(x, _)| solve_roots(&[(x.clone(), 1.0)]).map(|r| r[0]))
        .collect::<Result<Vec<_>>>()?;
    let mixed_value = mixed_roots.iter().zip(partition).map(|(y, (_, q))| y * q).sum();
    let mixture_of_separate = separate_roots.iter().zip(partition).map(|(y, (_, q))| y * q).sum();
    let max_discrepancy = mixed_roots
        .iter()
        .zip(&separate_roots)
        .map(|(a, b)| (a - b).abs())
        .fold(f64::abs(mixed_value - mixture_of_separate), f64::max);
    Ok(PartitionReport {
        passed: max_discrepancy <= 1e-10,
        mixed_roots,
        separate_roots,
        mixed_value,
        mixture_of_separate,
        max_discrepancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde_sim::Constant;

    fn brownian(t: f64) -> GameSpec {
        GameSpec::new(1, 1, t).unwrap().with_diffusion(|_, _, _, _, s| s[0] = 1.0)
    }

    fn lattice(spec: &GameSpec, steps: usize) -> PathBundle {
        let grid = TimeGrid::new(0.0, spec.horizon, steps).unwrap();
        simulate(spec, &ControlGrid::single(), &grid, &NoiseModel::binomial(), &[0.0], &Constant(0), &Constant(0)).unwrap()
    }

    #[test]
    fn constant_terminal_is_a_martingale() {
        let spec = brownian(1.0);
        let b = lattice(&spec, 6);
        let xi = TerminalData::from_fn(&b, |_| 2.5);
        let s = solve_backward(&spec, &ControlGrid::single(), &b, &xi, Driver::Game, &BsdeOptions::default()).unwrap();
        for k in 0..6 {
            assert!(s.y[k].iter().all(|&y| (y - 2.5).abs() < 1e-14));
            assert!(s.z[k].iter().all(|&z| z.abs() < 1e-14));
        }
    }

    #[test]
    fn constant_driver_integrates() {
        let spec = brownian(0.8);
        let b = lattice(&spec, 8);
        let xi = TerminalData::from_fn(&b, |_| 0.0);
        let g = |_: &DriverPoint| 1.5;
        let s = solve_backward(&spec, &ControlGrid::single(), &b, &xi, Driver::Custom(&g), &BsdeOptions::default()).unwrap();
        for k in 0..=8 {
            let expect = 1.5 * (0.8 - b.grid.t(k));
            assert!(s.y[k].iter().all(|&y| (y - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn z_of_linear_terminal_is_sigma() {
        let spec = brownian(1.0);
        let b = lattice(&spec, 4);
        let xi = TerminalData::from_fn(&b, |x| 3.0 * x[0]);
        let s = solve_backward(&spec, &ControlGrid::single(), &b, &xi, Driver::Game, &BsdeOptions::default()).unwrap();
        assert!(s.z.iter().flatten().all(|&z| (z - 3.0).abs() < 1e-12));
    }

    #[test]
    fn implicit_scheme_matches_backward_euler_formula() {
        let spec = GameSpec::new(1, 1, 1.0).unwrap();
        let b = lattice(&spec, 10);
        let xi = TerminalData::from_fn(&b, |_| 1.0);
        let g = |p: &DriverPoint| -p.y;
        let opts = BsdeOptions { scheme: Scheme::Implicit, basis_degree: 2 };
        let s = solve_backward(&spec, &ControlGrid::single(), &b, &xi, Driver::Custom(&g), &opts).unwrap();
        // Picard iterates of y = 1 − 0.1·y converge towards 1/1.1 per step
        let exact = (1.0f64 / 1.1).powi(10);
        assert!((s.y[0][0] - exact).abs() < 1e-4);
    }

    #[test]
    fn driver_blow_up_is_reported() {
        let spec = brownian(1.0);
        let b = lattice(&spec, 3);
        let xi = TerminalData::from_fn(&b, |_| 1.0);
        let g = |_: &DriverPoint| f64::INFINITY;
        let err = solve_backward(&spec, &ControlGrid::single(), &b, &xi, Driver::Custom(&g), &BsdeOptions::default()).unwrap_err();
        assert!(matches!(err, LabError::DriverBlowUp { step: 2 }));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let spec = brownian(1.0);
        let b = lattice(&spec, 3);
        let err = solve_backward(&spec, &ControlGrid::single(), &b, &TerminalData(vec![0.0]), Driver::Game, &BsdeOptions::default()).unwrap_err();
        assert!(matches!(err, LabError::Invalid(_)));
    }

    #[test]
    fn regression_recovers_quadratic_conditional_expectation() {
        let spec = brownian(1.0);
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let b = simulate(&spec, &ControlGrid::single(), &grid, &NoiseModel::gaussian(4000, 11), &[0.0], &Constant(0), &Constant(0)).unwrap();
        let xi = TerminalData::from_fn(&b, |x| x[0] * x[0]);
        let s = solve_backward(&spec, &ControlGrid::single(), &b, &xi, Driver::Game, &BsdeOptions::default()).unwrap();
        assert_eq!(s.basis_size, Some(3));
        // E[X_1² | X_t] = X_t² + 1 − t lies in the basis
        assert!((s.y[0][0] - 1.0).abs() < 0.06, "{}", s.y[0][0]);
    }

    #[test]
    fn degenerate_basis_detected() {
        // two distinct states only: a quadratic basis is rank deficient
        let spec = GameSpec::new(1, 1, 1.0).unwrap().with_diffusion(|t, _, _, _, s| s[0] = if t < 0.5 { 1.0 } else { 0.0 });
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let b = simulate(&spec, &ControlGrid::single(), &grid, &NoiseModel::gaussian(50, 1), &[0.0], &Constant(0), &Constant(0)).unwrap();
        let xi = TerminalData::from_fn(&b, |x| x[0]);
        let opts = BsdeOptions { scheme: Scheme::Explicit, basis_degree: 60 };
        let err = solve_backward(&spec, &ControlGrid::single(), &b, &xi, Driver::Game, &opts).unwrap_err();
        assert!(matches!(err, LabError::DegenerateBasis { step: 1, .. }), "{err}");
    }

    #[test]
    fn monomial_count() {
        assert_eq!(monomial_exponents(1, 2).len(), 3);
        assert_eq!(monomial_exponents(2, 2).len(), 6);
        assert_eq!(monomial_exponents(3, 3).len(), 20);
        assert_eq!(monomial_exponents(2, 2)[0], vec![0, 0]);
    }
}

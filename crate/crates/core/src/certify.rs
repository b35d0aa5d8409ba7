//! Localization around a smooth test function `φ` on a short window
//! `[t, t+δ]`: the auxiliary BSDEs driven by
//!
//! ```text
//! F(s,x,y,z,u,v) = ∂φ/∂s + ½tr(σσᵀD²φ) + Dφ·b + f(s, x, y+φ, z+Dφ·σ, u, v)
//! ```
//!
//! along the state (`Y¹`), with the state frozen at `x` (`Y²`), with the
//! inner minimum taken inside the driver (`Y³`), and the deterministic
//! `Y₀` solving `−Ẏ₀ = F₀(s, x, Y₀, 0)`.
//!
//! On the lattice the generator of `φ` can be taken either analytically (as
//! above) or as its discrete Itô expansion along the chain. Only the latter
//! makes `Y¹ = G[φ(t+δ, X_{t+δ})] − φ(t, x)` hold to roundoff.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::bsde::{solve_backward, BsdeOptions, Driver, DriverPoint, TerminalData};
use crate::error::{LabError, Result};
use crate::model::{f0, local_driver_with, ControlGrid, GameSpec, Jet, Scratch, TestFunction};
use crate::sde_sim::{simulate_lattice, ControlProcess, LatticeTable, OpenLoop, PathBundle, TimeGrid};
use crate::FORMAT_HEADER;

#[derive(Clone)]
pub struct LocalizationInstance {
    pub spec: GameSpec,
    pub phi: Arc<dyn TestFunction>,
    pub t: f64,
    pub x: Vec<f64>,
    pub delta: f64,
    pub controls: ControlGrid,
    /// Lattice steps across the window.
    pub window_steps: usize,
    pub node_budget: usize,
}

impl LocalizationInstance {
    pub fn new(
        spec: GameSpec,
        phi: Arc<dyn TestFunction>,
        t: f64,
        x: Vec<f64>,
        delta: f64,
        controls: ControlGrid,
        window_steps: usize,
    ) -> Result<Self> {
        if !(delta > 0.0 && t >= 0.0 && t + delta <= spec.horizon + 1e-12) {
            return Err(LabError::invalid(format!(
                "window [{t}, {t} + {delta}] must satisfy 0 < δ ≤ T − t with T = {}",
                spec.horizon
            )));
        }
        if x.len() != spec.dim_state {
            return Err(LabError::invalid("base point dimension does not match the game"));
        }
        if window_steps == 0 {
            return Err(LabError::invalid("window needs at least one step"));
        }
        Ok(LocalizationInstance {
            spec,
            phi,
            t,
            x,
            delta,
            controls,
            window_steps,
            node_budget: crate::sde_sim::DEFAULT_NODE_BUDGET,
        })
    }

    /// Same instance on a different window length.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        let mut out = LocalizationInstance::new(
            self.spec.clone(),
            self.phi.clone(),
            self.t,
            self.x.clone(),
            delta,
            self.controls.clone(),
            self.window_steps,
        )?;
        out.node_budget = self.node_budget;
        Ok(out)
    }

    pub fn window(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t, (self.t + self.delta).min(self.spec.horizon), self.window_steps)
    }

    pub fn simulate(&self, u: &dyn ControlProcess, v: &dyn ControlProcess) -> Result<PathBundle> {
        simulate_lattice(&self.spec, &self.controls, &self.window()?, &[(self.x.clone(), 1.0)], u, v, self.node_budget)
    }
}

/// How the `φ`-part of the localized driver is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// `F` exactly as written, from the derivatives of `φ`.
    Analytic,
    /// `(E_k φ_{k+1} − φ_k)/Δt + f(·, y + E_k φ_{k+1}, z + E_k[φ_{k+1}ΔB]/Δt, ·)`.
    Lattice,
}

fn analytic_driver<'a>(
    inst: &'a LocalizationInstance,
    frozen: Option<&'a [f64]>,
) -> impl Fn(&DriverPoint) -> f64 + Sync + 'a {
    move |p: &DriverPoint| {
        let x = frozen.unwrap_or(p.x);
        let jet = Jet::at(inst.phi.as_ref(), p.t, x);
        let mut sc = Scratch::new(inst.spec.dim_state, inst.spec.dim_noise);
        local_driver_with(&inst.spec, &jet, p.t, x, p.y, p.z, inst.controls.u(p.u), inst.controls.v(p.v), &mut sc)
            .unwrap_or(f64::NAN)
    }
}

fn root(sol: &crate::bsde::BsdeSolution) -> f64 {
    sol.y[0][0]
}

/// `Y¹_t`: driver `F` along the simulated state, terminal 0.
pub fn solve_y1(
    inst: &LocalizationInstance,
    u: &dyn ControlProcess,
    v: &dyn ControlProcess,
    generator: Generator,
) -> Result<f64> {
    let bundle = inst.simulate(u, v)?;
    let zero = TerminalData::from_fn(&bundle, |_| 0.0);
    let opts = BsdeOptions::default();
    match generator {
        Generator::Analytic => {
            let g = analytic_driver(inst, None);
            Ok(root(&solve_backward(&inst.spec, &inst.controls, &bundle, &zero, Driver::Custom(&g), &opts)?))
        }
        Generator::Lattice => {
            let lattice = bundle.lattice().expect("lattice bundle");
            let grid = bundle.grid;
            let dt = grid.dt();
            let inv_b = 1.0 / lattice.branching() as f64;
            let d = inst.spec.dim_noise;
            // per node: φ_k, E_k φ_{k+1}, E_k[φ_{k+1} ΔB]/Δt
            let mut phi_now = Vec::with_capacity(grid.steps);
            let mut phi_mean = Vec::with_capacity(grid.steps);
            let mut phi_z = Vec::with_capacity(grid.steps);
            for k in 0..grid.steps {
                let next: Vec<f64> =
                    lattice.levels[k + 1].iter().map(|n| inst.phi.value(grid.t(k + 1), &n.x)).collect();
                let mut now = Vec::new();
                let mut mean = Vec::new();
                let mut z = Vec::new();
                for node in &lattice.levels[k] {
                    now.push(inst.phi.value(grid.t(k), &node.x));
                    let mut e = 0.0;
                    let mut zz = vec![0.0; d];
                    for (c, &child) in node.children.iter().enumerate() {
                        e += next[child];
                        for (zj, db) in zz.iter_mut().zip(&lattice.branch_increments[c]) {
                            *zj += next[child] * db;
                        }
                    }
                    mean.push(e * inv_b);
                    z.push(zz.into_iter().map(|q| q * inv_b / dt).collect::<Vec<f64>>());
                }
                phi_now.push(now);
                phi_mean.push(mean);
                phi_z.push(z);
            }
            let g = |p: &DriverPoint| -> f64 {
                let (k, i) = (p.step, p.node);
                let z: Vec<f64> = p.z.iter().zip(&phi_z[k][i]).map(|(a, b)| a + b).collect();
                let f = inst
                    .spec
                    .driver_at(p.t, p.x, p.y + phi_mean[k][i], &z, inst.controls.u(p.u), inst.controls.v(p.v))
                    .unwrap_or(f64::NAN);
                (phi_mean[k][i] - phi_now[k][i]) / dt + f
            };
            Ok(root(&solve_backward(&inst.spec, &inst.controls, &bundle, &zero, Driver::Custom(&g), &opts)?))
        }
    }
}

/// `Y²`: driver `F` with the state frozen at `x`, terminal 0. Returns the
/// full solution so that window aggregates can be formed.
pub fn solve_y2_solution(
    inst: &LocalizationInstance,
    u: &dyn ControlProcess,
    v: &dyn ControlProcess,
) -> Result<(PathBundle, crate::bsde::BsdeSolution)> {
    let bundle = inst.simulate(u, v)?;
    let zero = TerminalData::from_fn(&bundle, |_| 0.0);
    let g = analytic_driver(inst, Some(&inst.x));
    let sol = solve_backward(&inst.spec, &inst.controls, &bundle, &zero, Driver::Custom(&g), &BsdeOptions::default())?;
    Ok((bundle, sol))
}

pub fn solve_y2(inst: &LocalizationInstance, u: &dyn ControlProcess, v: &dyn ControlProcess) -> Result<f64> {
    Ok(root(&solve_y2_solution(inst, u, v)?.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub y1: f64,
    /// `G[φ(t+δ, X_{t+δ})] − φ(t, x)`.
    pub semigroup_side: f64,
    pub difference: f64,
    /// Same comparison with the analytic generator (differs by `O(Δt)`).
    pub analytic_difference: f64,
    pub passed: bool,
}

/// Lemma-5.1 style identity on the lattice, to 1e-10.
pub fn localization_identity(
    inst: &LocalizationInstance,
    u: &dyn ControlProcess,
    v: &dyn ControlProcess,
) -> Result<IdentityReport> {
    let bundle = inst.simulate(u, v)?;
    let t1 = bundle.grid.t1;
    let eta = TerminalData::from_fn(&bundle, |x| inst.phi.value(t1, x));
    let g = solve_backward(&inst.spec, &inst.controls, &bundle, &eta, Driver::Game, &BsdeOptions::default())?;
    let semigroup_side = root(&g) - inst.phi.value(inst.t, &inst.x);
    let y1 = solve_y1(inst, u, v, Generator::Lattice)?;
    let analytic = solve_y1(inst, u, v, Generator::Analytic)?;
    let difference = (y1 - semigroup_side).abs();
    Ok(IdentityReport {
        y1,
        semigroup_side,
        difference,
        analytic_difference: (analytic - semigroup_side).abs(),
        passed: difference <= 1e-10,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub deltas: Vec<f64>,
    pub values: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Every value fell below 1e-14; the slope is meaningless.
    pub vacuous: bool,
    pub passed: bool,
}

fn fit_rate(deltas: Vec<f64>, values: Vec<f64>, threshold: f64) -> RateReport {
    if values.iter().all(|v| *v < 1e-14) {
        return RateReport { deltas, values, slope: f64::NAN, intercept: f64::NAN, vacuous: true, passed: false };
    }
    let xs: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let slope = crate::stats::ls_slope(&xs, &ys);
    let n = xs.len() as f64;
    let intercept = (ys.iter().sum::<f64>() - slope * xs.iter().sum::<f64>()) / n;
    let passed = slope >= threshold && intercept.is_finite();
    RateReport { deltas, values, slope, intercept, vacuous: false, passed }
}

/// Default window ladder.
pub const DELTA_LADDER: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

fn constant_pairs(controls: &ControlGrid) -> Vec<(usize, usize)> {
    (0..controls.nu()).flat_map(|i| (0..controls.nv()).map(move |j| (i, j))).collect()
}

fn clamp_ladder(inst: &LocalizationInstance, deltas: &[f64]) -> Vec<f64> {
    let room = inst.spec.horizon - inst.t;
    deltas.iter().map(|d| d.min(room)).collect()
}

/// Slope of `max_{u,v} |Y¹ − Y²|` against `δ` over constant control pairs;
/// passes at slope ≥ 1.4.
pub fn rate_check_52(inst: &LocalizationInstance, deltas: &[f64]) -> Result<RateReport> {
    let deltas = clamp_ladder(inst, deltas);
    let mut values = Vec::with_capacity(deltas.len());
    for &delta in &deltas {
        let w = inst.with_delta(delta)?;
        let mut worst: f64 = 0.0;
        for (i, j) in constant_pairs(&inst.controls) {
            let (u, v) = (crate::sde_sim::Constant(i), crate::sde_sim::Constant(j));
            let y1 = solve_y1(&w, &u, &v, Generator::Analytic)?;
            let y2 = solve_y2(&w, &u, &v)?;
            worst = worst.max((y1 - y2).abs());
        }
        values.push(worst);
    }
    Ok(fit_rate(deltas, values, 1.4))
}

/// Slope of `max_{u,v} (E∫|Y²| ds + E∫|Z²| ds)` against `δ`.
pub fn rate_check_54(inst: &LocalizationInstance, deltas: &[f64]) -> Result<RateReport> {
    let deltas = clamp_ladder(inst, deltas);
    let mut values = Vec::with_capacity(deltas.len());
    for &delta in &deltas {
        let w = inst.with_delta(delta)?;
        let mut worst: f64 = 0.0;
        for (i, j) in constant_pairs(&inst.controls) {
            let (u, v) = (crate::sde_sim::Constant(i), crate::sde_sim::Constant(j));
            let (bundle, sol) = solve_y2_solution(&w, &u, &v)?;
            let dt = bundle.grid.dt();
            let d = sol.dim_noise;
            let mut agg = 0.0;
            for k in 0..bundle.grid.steps {
                let weights = bundle.weights(k);
                for (node, wgt) in weights.iter().enumerate() {
                    let z = sol.z_at(k, node);
                    let znorm = z.iter().map(|c| c * c).sum::<f64>().sqrt();
                    agg += wgt * (sol.y[k][node].abs() + znorm) * dt;
                }
                debug_assert_eq!(sol.z[k].len(), weights.len() * d);
            }
            worst = worst.max(agg);
        }
        values.push(worst);
    }
    Ok(fit_rate(deltas, values, 1.4))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeReport {
    pub value: f64,
    /// Re-integration on the accepted mesh with every step halved.
    pub halved_value: f64,
    pub accepted_steps: usize,
    pub self_check_ok: bool,
}

/// Absolute tolerance of the adaptive integrator.
pub const ODE_TOL: f64 = 1e-10;

fn rk4_step(rhs: &dyn Fn(f64, f64) -> Result<f64>, tau: f64, y: f64, h: f64) -> Result<f64> {
    let k1 = rhs(tau, y)?;
    let k2 = rhs(tau + 0.5 * h, y + 0.5 * h * k1)?;
    let k3 = rhs(tau + 0.5 * h, y + 0.5 * h * k2)?;
    let k4 = rhs(tau + h, y + h * k3)?;
    Ok(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Integrates `dy/dτ = g(τ, y)` on `[0, len]` from `y(0) = 0` by RK4 with
/// step doubling; returns the value and the accepted mesh.
fn integrate(rhs: &dyn Fn(f64, f64) -> Result<f64>, len: f64, tol: f64) -> Result<(f64, Vec<f64>)> {
    let mut tau = 0.0;
    let mut y = 0.0;
    let mut h = len / 8.0;
    let mut mesh = vec![0.0];
    let mut guard = 0usize;
    while tau < len - 1e-15 * len.max(1.0) {
        guard += 1;
        if guard > 1_000_000 {
            return Err(LabError::Integration("too many steps".into()));
        }
        h = h.min(len - tau);
        let full = rk4_step(rhs, tau, y, h)?;
        let half = rk4_step(rhs, tau, y, 0.5 * h)?;
        let two = rk4_step(rhs, tau + 0.5 * h, half, 0.5 * h)?;
        let err = (two - full).abs() / 15.0;
        let allowed = tol * h / len;
        if !two.is_finite() {
            return Err(LabError::Integration(format!("non-finite state at τ = {tau}")));
        }
        if err <= allowed {
            tau += h;
            y = two + (two - full) / 15.0;
            mesh.push(tau);
        }
        let factor = if err == 0.0 { 4.0 } else { (0.9 * (allowed / err).powf(0.2)).clamp(0.2, 4.0) };
        h *= factor;
        if h < 1e-14 * len {
            return Err(LabError::Integration(format!("step size underflow at τ = {tau}")));
        }
    }
    Ok((y, mesh))
}

/// `Y₀(t)` for `−Ẏ₀ = F₀(s, x, Y₀, 0)`, `Y₀(t+δ) = 0`.
pub fn solve_y0_ode(inst: &LocalizationInstance) -> Result<OdeReport> {
    let end = inst.t + inst.delta;
    let z0 = vec![0.0; inst.spec.dim_noise];
    let rhs = |tau: f64, y: f64| -> Result<f64> {
        Ok(f0(&inst.spec, &inst.controls, inst.phi.as_ref(), end - tau, &inst.x, y, &z0)?.value)
    };
    let (value, mesh) = integrate(&rhs, inst.delta, ODE_TOL)?;
    let mut halved = 0.0;
    for w in mesh.windows(2) {
        let h = 0.5 * (w[1] - w[0]);
        halved = rk4_step(&rhs, w[0], halved, h)?;
        halved = rk4_step(&rhs, w[0] + h, halved, h)?;
    }
    Ok(OdeReport {
        value,
        halved_value: halved,
        accepted_steps: mesh.len() - 1,
        self_check_ok: (value - halved).abs() <= 1e-9,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupInfOptions {
    pub budget: u128,
    /// Also enumerate history-dependent processes (windows of ≤ 2 steps).
    pub adapted: bool,
}

impl Default for SupInfOptions {
    fn default() -> Self {
        SupInfOptions { budget: crate::dpp::DEFAULT_ENUMERATION_BUDGET, adapted: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupInfReport {
    /// `max_u min_v Y²_t` over piecewise-constant deterministic processes.
    pub enumeration: f64,
    pub y0: f64,
    /// Largest `|Y³_t(u) − min_v Y²_t(u, v)|` over the enumerated `u`.
    pub y3_gap: f64,
    /// `3 |y_N − y_{2N}|` from the stepwise recursion at `N` and `2N` steps.
    pub truncation_bound: f64,
    pub tolerance: f64,
    pub difference: f64,
    /// Value over history-dependent processes, when requested.
    pub adapted_enumeration: Option<f64>,
    pub passed: bool,
    /// Why deterministic processes suffice here.
    pub note: &'static str,
}

const SUPINF_NOTE: &str = "controls are piecewise constant and deterministic; with the state frozen \
and zero terminal data the frozen-state BSDE has Z = 0, so adapted processes cannot do better";

fn all_processes(n: usize, steps: usize) -> Vec<Vec<usize>> {
    let count = n.pow(steps as u32);
    (0..count)
        .map(|mut idx| {
            (0..steps)
                .map(|_| {
                    let d = idx % n;
                    idx /= n;
                    d
                })
                .collect()
        })
        .collect()
}

/// Stepwise `max_u min_v` recursion of the frozen-state driver on `steps`.
fn stepwise(inst: &LocalizationInstance, steps: usize) -> Result<f64> {
    let grid = TimeGrid::new(inst.t, inst.t + inst.delta, steps)?;
    let dt = grid.dt();
    let z0 = vec![0.0; inst.spec.dim_noise];
    let mut y = 0.0;
    for k in (0..steps).rev() {
        y += f0(&inst.spec, &inst.controls, inst.phi.as_ref(), grid.t(k), &inst.x, y, &z0)?.value * dt;
    }
    Ok(y)
}

/// Enumerates `max_u min_v Y²_t` over deterministic step processes, checks
/// `Y³_t(u) = min_v Y²_t(u, v)` and compares with the ODE value.
pub fn supinf_reduction_check(inst: &LocalizationInstance, opts: &SupInfOptions) -> Result<SupInfReport> {
    let m = inst.window_steps;
    let (nu, nv) = (inst.controls.nu(), inst.controls.nv());
    let required = (nu as u128).saturating_pow(m as u32).saturating_mul((nv as u128).saturating_pow(m as u32));
    if required > opts.budget {
        return Err(LabError::EnumerationBudget { required, budget: opts.budget });
    }
    let us = all_processes(nu, m);
    let vs = all_processes(nv, m);
    let mut enumeration = f64::NEG_INFINITY;
    let mut y3_gap: f64 = 0.0;
    for u in &us {
        let up = OpenLoop(u.clone());
        let mut inner = f64::INFINITY;
        for v in &vs {
            inner = inner.min(solve_y2(inst, &up, &OpenLoop(v.clone()))?);
        }
        let y3 = solve_y3(inst, &up)?;
        y3_gap = y3_gap.max((y3 - inner).abs());
        enumeration = enumeration.max(inner);
    }
    let adapted_enumeration = if opts.adapted { Some(adapted_supinf(inst, opts.budget)?) } else { None };
    let ode = solve_y0_ode(inst)?;
    let truncation_bound = 3.0 * (stepwise(inst, m)? - stepwise(inst, 2 * m)?).abs();
    let tolerance = 1e-8 * (1.0 + ode.value.abs()) + truncation_bound;
    let difference = (enumeration - ode.value).abs();
    Ok(SupInfReport {
        enumeration,
        y0: ode.value,
        y3_gap,
        truncation_bound,
        tolerance,
        difference,
        adapted_enumeration,
        passed: difference <= tolerance && y3_gap <= 1e-12,
        note: SUPINF_NOTE,
    })
}

/// `Y³`: frozen-state driver `F₁ = min_v F` under the `u` process alone.
fn solve_y3(inst: &LocalizationInstance, u: &dyn ControlProcess) -> Result<f64> {
    let bundle = inst.simulate(u, &crate::sde_sim::Constant(0))?;
    let zero = TerminalData::from_fn(&bundle, |_| 0.0);
    let x = inst.x.as_slice();
    let g = |p: &DriverPoint| -> f64 {
        crate::model::f1(&inst.spec, &inst.controls, inst.phi.as_ref(), p.t, x, p.y, p.z, inst.controls.u(p.u))
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    };
    Ok(root(&solve_backward(&inst.spec, &inst.controls, &bundle, &zero, Driver::Custom(&g), &BsdeOptions::default())?))
}

/// `max_u min_v Y²_t` over processes adapted to the lattice history.
fn adapted_supinf(inst: &LocalizationInstance, budget: u128) -> Result<f64> {
    let m = inst.window_steps;
    if m > 2 {
        return Err(LabError::invalid("adapted enumeration is limited to windows of at most 2 steps"));
    }
    let d = inst.spec.dim_noise;
    let b = 1usize << d;
    let nodes: usize = (0..m).map(|k| b.pow(k as u32)).sum();
    let (nu, nv) = (inst.controls.nu(), inst.controls.nv());
    let required = (nu as u128).saturating_pow(nodes as u32).saturating_mul((nv as u128).saturating_pow(nodes as u32));
    if required > budget {
        return Err(LabError::EnumerationBudget { required, budget });
    }
    let table = |flat: &[usize]| -> LatticeTable {
        let mut out = Vec::with_capacity(m);
        let mut at = 0;
        for k in 0..m {
            let len = b.pow(k as u32);
            out.push(flat[at..at + len].to_vec());
            at += len;
        }
        LatticeTable { dim_noise: d, table: out }
    };
    let mut best = f64::NEG_INFINITY;
    for u in all_processes(nu, nodes) {
        let ut = table(&u);
        let mut inner = f64::INFINITY;
        for v in all_processes(nv, nodes) {
            inner = inner.min(solve_y2(inst, &ut, &table(&v))?);
        }
        best = best.max(inner);
    }
    Ok(best)
}

/// One row of a certification table.
#[derive(Debug, Clone, PartialEq)]
pub struct CertRow {
    pub lemma: String,
    pub instance: String,
    pub delta: f64,
    pub lhs: f64,
    pub bound: f64,
    pub slope: f64,
    pub passed: bool,
}

pub fn write_cert_csv(rows: &[CertRow], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{FORMAT_HEADER}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["lemma", "instance", "delta", "lhs", "bound", "slope", "verdict"])?;
    for r in rows {
        w.write_record([
            r.lemma.clone(),
            r.instance.clone(),
            r.delta.to_string(),
            r.lhs.to_string(),
            r.bound.to_string(),
            r.slope.to_string(),
            if r.passed { "pass" } else { "fail" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

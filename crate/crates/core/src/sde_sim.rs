//! Forward simulation of the controlled SDE `dX = b dt + σ dB` by explicit
//! Euler–Maruyama, either on Gaussian Monte Carlo paths or on an exact
//! binomial (±√Δt per noise coordinate) lattice.
//!
//! Lattice bundles are stored level by level. When both control processes are
//! Markov (they only look at the step and the current state) nodes reaching
//! the same state are merged, which turns the binomial tree into a
//! recombining lattice for state-independent coefficients.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::model::{ControlGrid, GameSpec, Scratch};
use crate::FORMAT_HEADER;

/// States whose norm exceeds this are treated as a blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;

/// Default cap on the total number of lattice nodes.
pub const DEFAULT_NODE_BUDGET: usize = 1 << 22;

/// Uniform grid `t0 < t0 + Δt < … < t1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite() && t0 >= 0.0 && t0 < t1) {
            return Err(LabError::invalid(format!("time grid needs 0 ≤ t0 < t1, got [{t0}, {t1}]")));
        }
        if steps == 0 {
            return Err(LabError::invalid("time grid needs at least one step"));
        }
        Ok(TimeGrid { t0, t1, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn check_within(&self, horizon: f64) -> Result<()> {
        if self.t1 > horizon + 1e-12 {
            return Err(LabError::invalid(format!(
                "time grid ends at {} beyond horizon {horizon}",
                self.t1
            )));
        }
        Ok(())
    }

    /// The first `steps` steps of this grid.
    pub fn prefix(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.steps {
            return Err(LabError::invalid("prefix length out of range"));
        }
        TimeGrid::new(self.t0, self.t(steps), steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Gaussian { paths: usize, seed: u64 },
    Binomial { node_budget: usize },
}

impl NoiseModel {
    pub fn gaussian(paths: usize, seed: u64) -> Self {
        NoiseModel::Gaussian { paths, seed }
    }

    pub fn binomial() -> Self {
        NoiseModel::Binomial { node_budget: DEFAULT_NODE_BUDGET }
    }
}

/// A control process: picks a control index at step `k` from the noise
/// history `ΔB_0 … ΔB_{k-1}` (flattened, `k·d` entries) and the current state.
pub trait ControlProcess: Send + Sync {
    fn index(&self, step: usize, history: &[f64], x: &[f64]) -> usize;

    /// True when the choice ignores `history`.
    fn is_markov(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Constant(pub usize);

impl ControlProcess for Constant {
    fn index(&self, _: usize, _: &[f64], _: &[f64]) -> usize {
        self.0
    }
    fn is_markov(&self) -> bool {
        true
    }
}

/// Deterministic piecewise-constant control, one index per step.
#[derive(Debug, Clone)]
pub struct OpenLoop(pub Vec<usize>);

impl ControlProcess for OpenLoop {
    fn index(&self, step: usize, _: &[f64], _: &[f64]) -> usize {
        self.0[step]
    }
    fn is_markov(&self) -> bool {
        true
    }
}

/// Feedback law `(k, x) ↦ index`.
pub struct Feedback<F>(pub F);

impl<F> ControlProcess for Feedback<F>
where
    F: Fn(usize, &[f64]) -> usize + Send + Sync,
{
    fn index(&self, step: usize, _: &[f64], x: &[f64]) -> usize {
        (self.0)(step, x)
    }
    fn is_markov(&self) -> bool {
        true
    }
}

/// General adapted control `(k, history, x) ↦ index`.
pub struct Adapted<F>(pub F);

impl<F> ControlProcess for Adapted<F>
where
    F: Fn(usize, &[f64], &[f64]) -> usize + Send + Sync,
{
    fn index(&self, step: usize, history: &[f64], x: &[f64]) -> usize {
        (self.0)(step, history, x)
    }
}

/// Index of a lattice history: each step contributes one branch digit in
/// base `2^d`, earliest step most significant. Branch digit bit `j` is set
/// when `ΔB_j > 0`.
pub fn lattice_history_index(history: &[f64], d: usize) -> usize {
    history.chunks(d).fold(0usize, |acc, inc| {
        let digit = inc
            .iter()
            .enumerate()
            .fold(0usize, |b, (j, &db)| if db > 0.0 { b | (1 << j) } else { b });
        (acc << d) | digit
    })
}

/// Control given per lattice node: `table[k][history index]`.
#[derive(Debug, Clone)]
pub struct LatticeTable {
    pub dim_noise: usize,
    pub table: Vec<Vec<usize>>,
}

impl ControlProcess for LatticeTable {
    fn index(&self, step: usize, history: &[f64], _: &[f64]) -> usize {
        self.table[step][lattice_history_index(history, self.dim_noise)]
    }
}

/// Gaussian Monte Carlo paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub paths: usize,
    /// `[path][step][coordinate]`, `steps + 1` states per path.
    pub states: Vec<f64>,
    /// `[path][step][noise coordinate]`, `steps` increments per path.
    pub increments: Vec<f64>,
    pub u: Vec<usize>,
    pub v: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeNode {
    pub x: Vec<f64>,
    /// Representative parent (the first one that reached this node).
    pub parent: Option<usize>,
    /// Branch digit leading from `parent` into this node.
    pub branch: usize,
    /// Probability of reaching the node.
    pub weight: f64,
    /// Control indices applied at this node; `None` on the last level.
    pub controls: Option<(usize, usize)>,
    /// Child node per branch digit; empty on the last level.
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub levels: Vec<Vec<LatticeNode>>,
    /// `ΔB` per branch digit.
    pub branch_increments: Vec<Vec<f64>>,
}

impl Lattice {
    pub fn branching(&self) -> usize {
        self.branch_increments.len()
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Noise history `ΔB_0 … ΔB_{k-1}` of a node along its representative parents.
    pub fn history(&self, level: usize, node: usize) -> Vec<f64> {
        let d = self.branch_increments[0].len();
        let mut out = vec![0.0; level * d];
        let (mut lvl, mut idx) = (level, node);
        while lvl > 0 {
            let n = &self.levels[lvl][idx];
            out[(lvl - 1) * d..lvl * d].copy_from_slice(&self.branch_increments[n.branch]);
            idx = n.parent.expect("non-root node has a parent");
            lvl -= 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BundleKind {
    Paths(PathSet),
    Lattice(Lattice),
}

/// Simulated forward trajectories on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub kind: BundleKind,
}

impl PathBundle {
    pub fn is_lattice(&self) -> bool {
        matches!(self.kind, BundleKind::Lattice(_))
    }

    pub fn lattice(&self) -> Option<&Lattice> {
        match &self.kind {
            BundleKind::Lattice(l) => Some(l),
            BundleKind::Paths(_) => None,
        }
    }

    pub fn paths(&self) -> Option<&PathSet> {
        match &self.kind {
            BundleKind::Paths(p) => Some(p),
            BundleKind::Lattice(_) => None,
        }
    }

    /// Number of nodes (lattice) or paths at `step`.
    pub fn width(&self, step: usize) -> usize {
        match &self.kind {
            BundleKind::Paths(p) => p.paths,
            BundleKind::Lattice(l) => l.levels[step].len(),
        }
    }

    pub fn state(&self, step: usize, node: usize) -> &[f64] {
        let n = self.dim_state;
        match &self.kind {
            BundleKind::Paths(p) => {
                let base = (node * (self.grid.steps + 1) + step) * n;
                &p.states[base..base + n]
            }
            BundleKind::Lattice(l) => &l.levels[step][node].x,
        }
    }

    /// Probability weights of the nodes or paths at `step`.
    pub fn weights(&self, step: usize) -> Vec<f64> {
        match &self.kind {
            BundleKind::Paths(p) => p.weights.clone(),
            BundleKind::Lattice(l) => l.levels[step].iter().map(|n| n.weight).collect(),
        }
    }

    /// Control indices applied at `(step, node)`, `step < steps`.
    pub fn controls(&self, step: usize, node: usize) -> (usize, usize) {
        match &self.kind {
            BundleKind::Paths(p) => {
                let i = node * self.grid.steps + step;
                (p.u[i], p.v[i])
            }
            BundleKind::Lattice(l) => l.levels[step][node].controls.expect("controls on inner level"),
        }
    }

    /// The first `steps` steps of the bundle, i.e. the window `[t0, t_steps]`.
    pub fn truncate(&self, steps: usize) -> Result<PathBundle> {
        let grid = self.grid.prefix(steps)?;
        let kind = match &self.kind {
            BundleKind::Lattice(l) => {
                let mut levels: Vec<Vec<LatticeNode>> = l.levels[..=steps].to_vec();
                for node in levels[steps].iter_mut() {
                    node.controls = None;
                    node.children.clear();
                }
                BundleKind::Lattice(Lattice { levels, branch_increments: l.branch_increments.clone() })
            }
            BundleKind::Paths(p) => {
                let (n, d, old) = (self.dim_state, self.dim_noise, self.grid.steps);
                let mut out = PathSet {
                    paths: p.paths,
                    states: Vec::with_capacity(p.paths * (steps + 1) * n),
                    increments: Vec::with_capacity(p.paths * steps * d),
                    u: Vec::with_capacity(p.paths * steps),
                    v: Vec::with_capacity(p.paths * steps),
                    weights: p.weights.clone(),
                };
                for q in 0..p.paths {
                    out.states.extend_from_slice(&p.states[q * (old + 1) * n..(q * (old + 1) + steps + 1) * n]);
                    out.increments.extend_from_slice(&p.increments[q * old * d..(q * old + steps) * d]);
                    out.u.extend_from_slice(&p.u[q * old..q * old + steps]);
                    out.v.extend_from_slice(&p.v[q * old..q * old + steps]);
                }
                BundleKind::Paths(out)
            }
        };
        Ok(PathBundle { grid, dim_state: self.dim_state, dim_noise: self.dim_noise, kind })
    }

    /// Columnar export. Gaussian rows carry the outgoing increment `ΔB_k`
    /// (empty on the last step); lattice rows carry the increment that led
    /// into the node (empty on roots) and use the node id as `path`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{FORMAT_HEADER}")?;
        let mut w = csv::Writer::from_writer(file);
        let (n, d) = (self.dim_state, self.dim_noise);
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..d).map(|j| format!("dB{j}")));
        header.extend(["u_idx".into(), "v_idx".into(), "weight".into()]);
        w.write_record(&header)?;
        let steps = self.grid.steps;
        for k in 0..=steps {
            let weights = self.weights(k);
            for node in 0..self.width(k) {
                let mut row = vec![node.to_string(), k.to_string(), self.grid.t(k).to_string()];
                row.extend(self.state(k, node).iter().map(|x| x.to_string()));
                match &self.kind {
                    BundleKind::Paths(p) if k < steps => {
                        let base = (node * steps + k) * d;
                        row.extend(p.increments[base..base + d].iter().map(|x| x.to_string()));
                    }
                    BundleKind::Lattice(l) if k > 0 => {
                        let b = l.levels[k][node].branch;
                        row.extend(l.branch_increments[b].iter().map(|x| x.to_string()));
                    }
                    _ => row.extend((0..d).map(|_| String::new())),
                }
                if k < steps {
                    let (u, v) = self.controls(k, node);
                    row.push(u.to_string());
                    row.push(v.to_string());
                } else {
                    row.push(String::new());
                    row.push(String::new());
                }
                row.push(weights[node].to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn checked_control(idx: usize, len: usize, who: &str, step: usize) -> Result<usize> {
    if idx < len {
        Ok(idx)
    } else {
        Err(LabError::invalid(format!(
            "{who} control index {idx} out of range (grid has {len} points) at step {step}"
        )))
    }
}

fn euler_step(
    spec: &GameSpec,
    t: f64,
    dt: f64,
    x: &[f64],
    u: &[f64],
    v: &[f64],
    db: &[f64],
    sc: &mut Scratch,
    out: &mut [f64],
) -> Result<()> {
    let d = spec.dim_noise;
    spec.drift_at(t, x, u, v, &mut sc.b)?;
    spec.diffusion_at(t, x, u, v, &mut sc.sigma)?;
    for i in 0..x.len() {
        let mut noise = 0.0;
        for j in 0..d {
            noise += sc.sigma[i * d + j] * db[j];
        }
        out[i] = x[i] + sc.b[i] * dt + noise;
    }
    Ok(())
}

fn blown_up(x: &[f64]) -> bool {
    x.iter().any(|c| !c.is_finite()) || crate::model::norm(x) > BLOW_UP_THRESHOLD
}

/// Simulates the controlled SDE from a single initial state.
pub fn simulate(
    spec: &GameSpec,
    controls: &ControlGrid,
    grid: &TimeGrid,
    noise: &NoiseModel,
    x0: &[f64],
    u: &dyn ControlProcess,
    v: &dyn ControlProcess,
) -> Result<PathBundle> {
    match *noise {
        NoiseModel::Gaussian { paths, seed } => simulate_gaussian(spec, controls, grid, paths, seed, x0, u, v),
        NoiseModel::Binomial { node_budget } => {
            simulate_lattice(spec, controls, grid, &[(x0.to_vec(), 1.0)], u, v, node_budget)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_gaussian(
    spec: &GameSpec,
    controls: &ControlGrid,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    x0: &[f64],
    u: &dyn ControlProcess,
    v: &dyn ControlProcess,
) -> Result<PathBundle> {
    validate_start(spec, grid, x0)?;
    if paths == 0 {
        return Err(LabError::invalid("gaussian noise needs at least one path"));
    }
    let (n, d, steps) = (spec.dim_state, spec.dim_noise, grid.steps);
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    struct OnePath {
        states: Vec<f64>,
        increments: Vec<f64>,
        u: Vec<usize>,
        v: Vec<usize>,
    }

    let results: Vec<Result<OnePath>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut sc = Scratch::new(n, d);
            let mut out = OnePath {
                states: Vec::with_capacity((steps + 1) * n),
                increments: Vec::with_capacity(steps * d),
                u: Vec::with_capacity(steps),
                v: Vec::with_capacity(steps),
            };
            out.states.extend_from_slice(x0);
            let mut next = vec![0.0; n];
            for k in 0..steps {
                let x = &out.states[k * n..(k + 1) * n];
                let history = &out.increments[..k * d];
                let ui = checked_control(u.index(k, history, x), controls.nu(), "u", k)?;
                let vi = checked_control(v.index(k, history, x), controls.nv(), "v", k)?;
                let db: Vec<f64> = (0..d)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g * sqrt_dt
                    })
                    .collect();
                euler_step(spec, grid.t(k), dt, x, controls.u(ui), controls.v(vi), &db, &mut sc, &mut next)?;
                if blown_up(&next) {
                    return Err(LabError::BlowUp { step: k + 1, path: p });
                }
                out.states.extend_from_slice(&next);
                out.increments.extend_from_slice(&db);
                out.u.push(ui);
                out.v.push(vi);
            }
            Ok(out)
        })
        .collect();

    let mut set = PathSet {
        paths,
        states: Vec::with_capacity(paths * (steps + 1) * n),
        increments: Vec::with_capacity(paths * steps * d),
        u: Vec::with_capacity(paths * steps),
        v: Vec::with_capacity(paths * steps),
        weights: vec![1.0 / paths as f64; paths],
    };
    for r in results {
        let p = r?;
        set.states.extend(p.states);
        set.increments.extend(p.increments);
        set.u.extend(p.u);
        set.v.extend(p.v);
    }
    Ok(PathBundle { grid: *grid, dim_state: n, dim_noise: d, kind: BundleKind::Paths(set) })
}

fn validate_start(spec: &GameSpec, grid: &TimeGrid, x0: &[f64]) -> Result<()> {
    grid.check_within(spec.horizon)?;
    if x0.len() != spec.dim_state {
        return Err(LabError::invalid(format!(
            "initial state has dimension {}, game expects {}",
            x0.len(),
            spec.dim_state
        )));
    }
    if x0.iter().any(|c| !c.is_finite()) {
        return Err(LabError::invalid("initial state is not finite"));
    }
    Ok(())
}

fn merge_key(x: &[f64]) -> Vec<i64> {
    x.iter()
        .map(|&c| if c.abs() < 1e6 { (c * 1e12).round() as i64 } else { c.to_bits() as i64 })
        .collect()
}

/// Binomial lattice started from weighted initial states `(x_i, q_i)`; the
/// weights must sum to one. Every root is its own level-0 node.
pub fn simulate_lattice(
    spec: &GameSpec,
    controls: &ControlGrid,
    grid: &TimeGrid,
    roots: &[(Vec<f64>, f64)],
    u: &dyn ControlProcess,
    v: &dyn ControlProcess,
    node_budget: usize,
) -> Result<PathBundle> {
    if roots.is_empty() {
        return Err(LabError::invalid("lattice needs at least one initial state"));
    }
    for (x, q) in roots {
        validate_start(spec, grid, x)?;
        if !(*q >= 0.0 && q.is_finite()) {
            return Err(LabError::invalid("initial weights must be non-negative"));
        }
    }
    let total: f64 = roots.iter().map(|r| r.1).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(LabError::invalid(format!("initial weights sum to {total}, expected 1")));
    }
    let (n, d, steps) = (spec.dim_state, spec.dim_noise, grid.steps);
    let branching = 1usize
        .checked_shl(d as u32)
        .filter(|b| *b > 0)
        .ok_or_else(|| LabError::invalid("noise dimension too large for a lattice"))?;
    let merge = u.is_markov() && v.is_markov();
    if !merge {
        let mut required: u128 = 0;
        let mut level: u128 = roots.len() as u128;
        for _ in 0..=steps {
            required = required.saturating_add(level);
            level = level.saturating_mul(branching as u128);
        }
        if required > node_budget as u128 {
            return Err(LabError::BranchBudget { required, budget: node_budget as u128 });
        }
    }

    let dt = grid.dt();
    let s = dt.sqrt();
    let branch_increments: Vec<Vec<f64>> = (0..branching)
        .map(|c| (0..d).map(|j| if (c >> j) & 1 == 1 { s } else { -s }).collect())
        .collect();
    let mut levels: Vec<Vec<LatticeNode>> = Vec::with_capacity(steps + 1);
    levels.push(
        roots
            .iter()
            .map(|(x, q)| LatticeNode {
                x: x.clone(),
                parent: None,
                branch: 0,
                weight: *q,
                controls: None,
                children: Vec::new(),
            })
            .collect(),
    );
    let mut total_nodes = roots.len();
    let mut sc = Scratch::new(n, d);
    let mut next = vec![0.0; n];
    let child_weight = 1.0 / branching as f64;

    let mut lattice = Lattice { levels: Vec::new(), branch_increments };
    for k in 0..steps {
        let mut new_level: Vec<LatticeNode> = Vec::new();
        let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
        let t = grid.t(k);
        let width = levels[k].len();
        for node in 0..width {
            lattice.levels = std::mem::take(&mut levels);
            let history = if k == 0 { Vec::new() } else { lattice.history(k, node) };
            levels = std::mem::take(&mut lattice.levels);
            let x = levels[k][node].x.clone();
            let ui = checked_control(u.index(k, &history, &x), controls.nu(), "u", k)?;
            let vi = checked_control(v.index(k, &history, &x), controls.nv(), "v", k)?;
            let w = levels[k][node].weight * child_weight;
            let mut children = Vec::with_capacity(branching);
            for c in 0..branching {
                euler_step(
                    spec,
                    t,
                    dt,
                    &x,
                    controls.u(ui),
                    controls.v(vi),
                    &lattice.branch_increments[c],
                    &mut sc,
                    &mut next,
                )?;
                if blown_up(&next) {
                    return Err(LabError::BlowUp { step: k + 1, path: new_level.len() });
                }
                let existing = if merge { index.get(&merge_key(&next)).copied() } else { None };
                let child = match existing {
                    Some(idx) => {
                        new_level[idx].weight += w;
                        idx
                    }
                    None => {
                        let idx = new_level.len();
                        if merge {
                            index.insert(merge_key(&next), idx);
                        }
                        new_level.push(LatticeNode {
                            x: next.clone(),
                            parent: Some(node),
                            branch: c,
                            weight: w,
                            controls: None,
                            children: Vec::new(),
                        });
                        total_nodes += 1;
                        if total_nodes > node_budget {
                            return Err(LabError::BranchBudget {
                                required: total_nodes as u128,
                                budget: node_budget as u128,
                            });
                        }
                        idx
                    }
                };
                children.push(child);
            }
            let cur = &mut levels[k][node];
            cur.controls = Some((ui, vi));
            cur.children = children;
        }
        levels.push(new_level);
    }
    lattice.levels = levels;
    Ok(PathBundle { grid: *grid, dim_state: n, dim_noise: d, kind: BundleKind::Lattice(lattice) })
}

/// Moment estimates of a Gaussian bundle.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub p: u32,
    /// `E[sup_s |X_s|^p]` over the full grid.
    pub sup_moment: f64,
    /// `E[sup_s |X_s − x0|^p]` over the full grid.
    pub sup_increment_moment: f64,
    /// `E[|X_T − x0|^2]` and its standard error.
    pub terminal_second_moment: f64,
    pub terminal_second_moment_se: f64,
    /// Nested sub-horizon lengths and the matching `E[sup |X − x0|^p]`.
    pub deltas: Vec<f64>,
    pub increment_moments: Vec<f64>,
    /// Log-log slope of the increment moments against δ; `None` when skipped.
    pub fitted_exponent: Option<f64>,
    /// Set when the fitted exponent falls below `p/2 − 0.3`.
    pub flagged: bool,
}

/// Weighted moments of `sup_s |X_s|^p` and `sup_s |X_s − x0|^p`, plus the
/// exponent of the latter over the nested sub-horizons `N, N/2, N/4, …`.
pub fn moment_check(bundle: &PathBundle, x0: &[f64], p: u32) -> Result<MomentReport> {
    let set = bundle
        .paths()
        .ok_or_else(|| LabError::invalid("moment_check needs a gaussian bundle"))?;
    if p == 0 || p % 2 != 0 {
        return Err(LabError::invalid("moment order must be a positive even integer"));
    }
    let steps = bundle.grid.steps;
    let mut horizons = vec![steps];
    while let Some(&m) = horizons.last() {
        if m % 2 == 0 && m / 2 >= 1 && horizons.len() < 4 {
            horizons.push(m / 2);
        } else {
            break;
        }
    }
    let pw = |r: f64| r.powi(p as i32);
    let mut sup_moment = 0.0;
    let mut inc_moments = vec![0.0; horizons.len()];
    let mut term = Vec::with_capacity(set.paths);
    for q in 0..set.paths {
        let w = set.weights[q];
        let mut sup_abs: f64 = 0.0;
        let mut running: f64 = 0.0;
        let mut sup_at = vec![0.0; steps + 1];
        for k in 0..=steps {
            let x = bundle.state(k, q);
            sup_abs = sup_abs.max(crate::model::norm(x));
            let dev = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            running = running.max(dev);
            sup_at[k] = running;
        }
        sup_moment += w * pw(sup_abs);
        for (slot, &m) in inc_moments.iter_mut().zip(&horizons) {
            *slot += w * pw(sup_at[m]);
        }
        let xt = bundle.state(steps, q);
        term.push((w, xt.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()));
    }
    let mean: f64 = term.iter().map(|(w, v)| w * v).sum();
    let var: f64 = term.iter().map(|(w, v)| w * (v - mean) * (v - mean)).sum();
    let se = (var / set.paths as f64).sqrt();
    let deltas: Vec<f64> = horizons.iter().map(|&m| m as f64 * bundle.grid.dt()).collect();

    let fitted_exponent = if horizons.len() >= 2 && inc_moments.iter().all(|&m| m > 0.0) {
        let xs: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = inc_moments.iter().map(|m| m.ln()).collect();
        Some(crate::stats::ls_slope(&xs, &ys))
    } else {
        None
    };
    let flagged = fitted_exponent.is_some_and(|e| e < p as f64 / 2.0 - 0.3);
    Ok(MomentReport {
        p,
        sup_moment,
        sup_increment_moment: inc_moments[0],
        terminal_second_moment: mean,
        terminal_second_moment_se: se,
        deltas,
        increment_moments: inc_moments,
        fitted_exponent,
        flagged,
    })
}

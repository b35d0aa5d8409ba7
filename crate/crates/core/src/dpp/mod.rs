//! Lower and upper values by backward dynamic programming on a state grid.
//!
//! One step of the recursion applies the one-step backward semigroup to the
//! later slice: with binomial children `x⁺ = x + bΔt + σΔB`,
//!
//! ```text
//! ȳ = E[w(x⁺)] + f(t_k, x, E[w(x⁺)], z̄, u, v) Δt,   z̄ = E[w(x⁺) ΔB] / Δt
//! ```
//!
//! and the slice value is `max_u min_v ȳ` (lower) or `min_v max_u ȳ`
//! (upper). Off-grid children are looked up through the grid's boundary
//! policy.

mod brute;
mod grid;

pub use brute::{
    brute_force_game, expectation_formulation_check, BruteForceOptions, BruteForceResult, ExpectationReport,
    StrategyEntry, StrategyTable, TinyGame, DEFAULT_ENUMERATION_BUDGET,
};
pub use grid::{Axis, BoundaryPolicy, Policy, StateGrid, Stencil, Tag, ValueField};

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::model::{ControlGrid, GameSpec, Scratch};
use crate::sde_sim::TimeGrid;

/// `ΔB` per branch digit; bit `j` set means `+√Δt` in coordinate `j`.
pub(crate) fn branch_increments(d: usize, dt: f64) -> Vec<Vec<f64>> {
    let s = dt.sqrt();
    (0..1usize << d)
        .map(|c| (0..d).map(|j| if (c >> j) & 1 == 1 { s } else { -s }).collect())
        .collect()
}

/// Fails unless every child keeps a non-negative weight in the one-step
/// operator: `1 − LΔt − L√(dΔt) ≥ 0` with `L` the `(y, z)` Lipschitz constant.
pub fn check_monotone_step(spec: &GameSpec, dt: f64) -> Result<()> {
    let l = spec.yz_lipschitz();
    let d = spec.dim_noise as f64;
    let weight = 1.0 - l * dt - l * (d * dt).sqrt();
    if weight < -1e-12 {
        return Err(LabError::Cfl(format!(
            "child weight 1 − LΔt − L√(dΔt) = {weight:.3e} with L = {l}, Δt = {dt}"
        )));
    }
    Ok(())
}

/// The one-step semigroup for one control pair, reading the later slice
/// through `lookup`. Returns the value and the number of off-grid lookups.
#[allow(clippy::too_many_arguments)]
fn one_step(
    spec: &GameSpec,
    t: f64,
    dt: f64,
    x: &[f64],
    u: &[f64],
    v: &[f64],
    branches: &[Vec<f64>],
    sc: &mut Scratch,
    lookup: &mut dyn FnMut(&[f64]) -> Result<(f64, bool)>,
) -> Result<(f64, usize)> {
    let (n, d) = (spec.dim_state, spec.dim_noise);
    spec.drift_at(t, x, u, v, &mut sc.b)?;
    spec.diffusion_at(t, x, u, v, &mut sc.sigma)?;
    let degenerate = sc.sigma.iter().all(|s| *s == 0.0);
    let inv_b = 1.0 / branches.len() as f64;
    let mut ey = 0.0;
    let mut z = vec![0.0; d];
    let mut hits = 0;
    let mut child = vec![0.0; n];
    for db in branches {
        for i in 0..n {
            let noise: f64 = (0..d).map(|j| sc.sigma[i * d + j] * db[j]).sum();
            child[i] = x[i] + sc.b[i] * dt + noise;
        }
        let (w, outside) = lookup(&child)?;
        hits += outside as usize;
        ey += w;
        if !degenerate {
            for (zj, dbj) in z.iter_mut().zip(db) {
                *zj += w * dbj;
            }
        }
    }
    ey *= inv_b;
    for zj in z.iter_mut() {
        *zj *= inv_b / dt;
    }
    let f = spec.driver_at(t, x, ey, &z, u, v)?;
    Ok((ey + f * dt, hits))
}

/// Saddle scan over a row-major `nu × nv` table keeping every inner response.
/// Returns `(value, outer, responses)`; first index wins ties.
fn scan(table: &[f64], nu: usize, nv: usize, tag: Tag) -> (f64, usize, Vec<usize>) {
    match tag {
        Tag::Lower => {
            let mut responses = Vec::with_capacity(nu);
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..nu {
                let mut inner = (f64::INFINITY, 0);
                for j in 0..nv {
                    if table[i * nv + j] < inner.0 {
                        inner = (table[i * nv + j], j);
                    }
                }
                responses.push(inner.1);
                if inner.0 > best.0 {
                    best = (inner.0, i);
                }
            }
            (best.0, best.1, responses)
        }
        Tag::Upper => {
            let mut responses = Vec::with_capacity(nv);
            let mut best = (f64::INFINITY, 0);
            for j in 0..nv {
                let mut inner = (f64::NEG_INFINITY, 0);
                for i in 0..nu {
                    if table[i * nv + j] > inner.0 {
                        inner = (table[i * nv + j], i);
                    }
                }
                responses.push(inner.1);
                if inner.0 < best.0 {
                    best = (inner.0, j);
                }
            }
            (best.0, best.1, responses)
        }
    }
}

/// Value iteration with terminal slice `Φ` on the nodes. The time grid must
/// end at the horizon.
pub fn value_iteration(
    spec: &GameSpec,
    controls: &ControlGrid,
    sgrid: &StateGrid,
    tgrid: &TimeGrid,
    tag: Tag,
) -> Result<ValueField> {
    if (tgrid.t1 - spec.horizon).abs() > 1e-12 {
        return Err(LabError::invalid(format!(
            "value iteration needs a time grid ending at the horizon {}, got {}",
            spec.horizon, tgrid.t1
        )));
    }
    let terminal = (0..sgrid.len())
        .map(|i| spec.terminal_at(&sgrid.coords(i)))
        .collect::<Result<Vec<_>>>()?;
    sweep(spec, controls, sgrid, tgrid, tag, terminal)
}

/// Runs the recursion on `tgrid` from an arbitrary terminal slice.
pub fn sweep(
    spec: &GameSpec,
    controls: &ControlGrid,
    sgrid: &StateGrid,
    tgrid: &TimeGrid,
    tag: Tag,
    terminal: Vec<f64>,
) -> Result<ValueField> {
    if sgrid.dim() != spec.dim_state {
        return Err(LabError::invalid("state grid dimension does not match the game"));
    }
    if terminal.len() != sgrid.len() {
        return Err(LabError::invalid("terminal slice does not match the state grid"));
    }
    tgrid.check_within(spec.horizon)?;
    let dt = tgrid.dt();
    check_monotone_step(spec, dt)?;
    let (n, d, nu, nv) = (spec.dim_state, spec.dim_noise, controls.nu(), controls.nv());
    let branches = branch_increments(d, dt);
    let steps = tgrid.steps;
    let mut values = vec![Vec::new(); steps + 1];
    let mut outer = vec![Vec::new(); steps];
    let mut responses = vec![Vec::new(); steps];
    let mut boundary_hits = 0;
    values[steps] = terminal;
    for k in (0..steps).rev() {
        let next = &values[k + 1];
        let t = tgrid.t(k);
        let rows: Vec<Result<(f64, usize, Vec<usize>, usize)>> = (0..sgrid.len())
            .into_par_iter()
            .map(|node| {
                let x = sgrid.coords(node);
                let mut sc = Scratch::new(n, d);
                let mut lookup = |c: &[f64]| -> Result<(f64, bool)> {
                    let s = sgrid.stencil(c);
                    Ok((s.entries.iter().map(|&(i, w)| w * next[i]).sum(), s.outside))
                };
                let mut table = vec![0.0; nu * nv];
                let mut hits = 0;
                for i in 0..nu {
                    for j in 0..nv {
                        let (val, h) =
                            one_step(spec, t, dt, &x, controls.u(i), controls.v(j), &branches, &mut sc, &mut lookup)?;
                        table[i * nv + j] = val;
                        hits += h;
                    }
                }
                let (value, o, r) = scan(&table, nu, nv, tag);
                if !value.is_finite() {
                    return Err(LabError::NonFinite { step: k, node });
                }
                Ok((value, o, r, hits))
            })
            .collect();
        let mut slice = Vec::with_capacity(rows.len());
        let mut o_slice = Vec::with_capacity(rows.len());
        let mut r_slice = Vec::with_capacity(rows.len());
        for row in rows {
            let (v, o, r, h) = row?;
            slice.push(v);
            o_slice.push(o);
            r_slice.push(r);
            boundary_hits += h;
        }
        values[k] = slice;
        outer[k] = o_slice;
        responses[k] = r_slice;
    }
    Ok(ValueField {
        tag,
        tgrid: *tgrid,
        sgrid: sgrid.clone(),
        values,
        policy: Some(Policy { outer, responses }),
        boundary_hits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Player {
    /// Chooses `u`.
    Maximizer,
    /// Chooses `v`.
    Minimizer,
}

/// A control law read off a field's recorded optimizers. For the field's
/// outer player it is a feedback law of `(k, x)`; for the inner player it is
/// a one-step strategy of `(k, x, opponent index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedLaw {
    pub player: Player,
    pub feedback: bool,
    pub sgrid: StateGrid,
    pub tgrid: TimeGrid,
    table: Vec<Vec<Vec<usize>>>,
}

impl ExtractedLaw {
    /// Control index at step `k` for the grid node nearest to `x`.
    pub fn choose(&self, k: usize, x: &[f64], opponent: usize) -> usize {
        let entry = &self.table[k][self.sgrid.nearest(x)];
        if self.feedback {
            entry[0]
        } else {
            entry[opponent]
        }
    }
}

pub fn epsilon_optimal_extract(field: &ValueField, player: Player) -> Result<ExtractedLaw> {
    let policy = field
        .policy
        .as_ref()
        .ok_or_else(|| LabError::invalid("field carries no recorded optimizers"))?;
    let outer_player = match field.tag {
        Tag::Lower => Player::Maximizer,
        Tag::Upper => Player::Minimizer,
    };
    let feedback = player == outer_player;
    let table = if feedback {
        policy.outer.iter().map(|s| s.iter().map(|&o| vec![o]).collect()).collect()
    } else {
        policy.responses.clone()
    };
    Ok(ExtractedLaw { player, feedback, sgrid: field.sgrid.clone(), tgrid: field.tgrid, table })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub field_value: f64,
    pub replay_value: f64,
    /// How much the law gives away against a best-responding opponent
    /// (`field − replay` for the maximizer, `replay − field` for the minimizer).
    pub shortfall: f64,
    /// A-posteriori bound `N · max_k Σ_i max |Δ²_i V_{k+1}| / 8`.
    pub epsilon: f64,
    pub passed: bool,
    pub states_visited: usize,
}

/// Plays `law` from `x0` against a best-responding opponent on the binomial
/// tree (states reached twice are merged) and compares with the field.
pub fn replay(
    spec: &GameSpec,
    controls: &ControlGrid,
    field: &ValueField,
    law: &ExtractedLaw,
    x0: &[f64],
    node_budget: usize,
) -> Result<ReplayReport> {
    let tgrid = field.tgrid;
    let (n, d) = (spec.dim_state, spec.dim_noise);
    let dt = tgrid.dt();
    let branches = branch_increments(d, dt);
    let steps = tgrid.steps;
    let n_opp = match law.player {
        Player::Maximizer => controls.nv(),
        Player::Minimizer => controls.nu(),
    };
    let pair = |k: usize, x: &[f64], o: usize| -> (usize, usize) {
        let own = law.choose(k, x, o);
        match law.player {
            Player::Maximizer => (own, o),
            Player::Minimizer => (o, own),
        }
    };
    let key = |x: &[f64]| -> Vec<i64> { x.iter().map(|c| (c * 1e10).round() as i64).collect() };

    // forward: reachable states per level
    let mut levels: Vec<Vec<Vec<f64>>> = vec![vec![x0.to_vec()]];
    let mut visited = 1usize;
    let mut sc = Scratch::new(n, d);
    for k in 0..steps {
        let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut next: Vec<Vec<f64>> = Vec::new();
        for x in &levels[k] {
            for o in 0..n_opp {
                let (i, j) = pair(k, x, o);
                spec.drift_at(tgrid.t(k), x, controls.u(i), controls.v(j), &mut sc.b)?;
                spec.diffusion_at(tgrid.t(k), x, controls.u(i), controls.v(j), &mut sc.sigma)?;
                for db in &branches {
                    let c: Vec<f64> = (0..n)
                        .map(|r| x[r] + sc.b[r] * dt + (0..d).map(|q| sc.sigma[r * d + q] * db[q]).sum::<f64>())
                        .collect();
                    index.entry(key(&c)).or_insert_with(|| {
                        next.push(c);
                        next.len() - 1
                    });
                }
            }
        }
        visited += next.len();
        if visited > node_budget {
            return Err(LabError::BranchBudget { required: visited as u128, budget: node_budget as u128 });
        }
        levels.push(next);
    }

    // backward: opponent best-responds node by node
    let mut vals: Vec<f64> = levels[steps].iter().map(|x| spec.terminal_at(x)).collect::<Result<_>>()?;
    for k in (0..steps).rev() {
        let index: HashMap<Vec<i64>, usize> = levels[k + 1].iter().enumerate().map(|(i, x)| (key(x), i)).collect();
        let later = vals;
        let mut lookup = |c: &[f64]| -> Result<(f64, bool)> {
            let i = index
                .get(&key(c))
                .ok_or_else(|| LabError::invalid("replay child missing from the forward pass"))?;
            Ok((later[*i], false))
        };
        let mut out = Vec::with_capacity(levels[k].len());
        for x in &levels[k] {
            let mut best = match law.player {
                Player::Maximizer => f64::INFINITY,
                Player::Minimizer => f64::NEG_INFINITY,
            };
            for o in 0..n_opp {
                let (i, j) = pair(k, x, o);
                let (val, _) =
                    one_step(spec, tgrid.t(k), dt, x, controls.u(i), controls.v(j), &branches, &mut sc, &mut lookup)?;
                best = match law.player {
                    Player::Maximizer => best.min(val),
                    Player::Minimizer => best.max(val),
                };
            }
            out.push(best);
        }
        vals = out;
    }
    let replay_value = vals[0];
    let field_value = field.at(0, x0);
    let shortfall = match law.player {
        Player::Maximizer => field_value - replay_value,
        Player::Minimizer => replay_value - field_value,
    };
    let epsilon = interpolation_epsilon(field);
    Ok(ReplayReport {
        field_value,
        replay_value,
        shortfall,
        epsilon,
        passed: shortfall <= epsilon + 1e-10,
        states_visited: visited,
    })
}

/// `N · max_k Σ_i max_node |Δ²_i V_{k+1}| / 8` over nodes with full neighbours.
fn interpolation_epsilon(field: &ValueField) -> f64 {
    let g = &field.sgrid;
    let inner = g.strict_interior();
    let mut worst: f64 = 0.0;
    for slice in &field.values[1..] {
        let mut per_step = 0.0;
        for i in 0..g.dim() {
            let mut off = vec![0isize; g.dim()];
            let mut m: f64 = 0.0;
            for node in (0..g.len()).filter(|&node| inner[node]) {
                off[i] = 1;
                let (p, _) = g.shifted(node, &off);
                off[i] = -1;
                let (q, _) = g.shifted(node, &off);
                off[i] = 0;
                m = m.max((slice[p] - 2.0 * slice[node] + slice[q]).abs());
            }
            per_step += m;
        }
        worst = worst.max(per_step);
    }
    field.tgrid.steps as f64 * worst / 8.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    /// `max |ΔW / Δx|` between neighbouring interior nodes over all slices.
    pub lipschitz_ratio: f64,
    /// Fitted exponent of `max |W_k − W_{k+m}| / (1 + |x|)` against `mΔt`;
    /// infinite when every increment vanishes.
    pub time_exponent: f64,
    /// `(lag in time, normalized increment)` per lag.
    pub lags: Vec<(f64, f64)>,
}

impl RegularityReport {
    pub fn time_ok(&self) -> bool {
        self.time_exponent >= 0.4
    }

    /// The finer grid's Lipschitz ratio may grow by at most 50 %.
    pub fn refines_to(&self, fine: &RegularityReport) -> bool {
        fine.lipschitz_ratio <= 1.5 * self.lipschitz_ratio + 1e-12
    }
}

/// Spatial Lipschitz ratio and time-Hölder exponent of a field, measured on
/// nodes at least `margin` away from the boundary.
pub fn regularity_probe(field: &ValueField, margin: f64) -> Result<RegularityReport> {
    let g = &field.sgrid;
    let steps = field.tgrid.steps;
    if steps < 2 || g.axes().iter().any(|a| a.nodes < 5) {
        return Err(LabError::invalid("regularity probe needs ≥ 3 time slices and ≥ 5 nodes per axis"));
    }
    let inside = g.interior(margin);
    let nodes: Vec<usize> = (0..g.len()).filter(|&i| inside[i]).collect();
    if nodes.is_empty() {
        return Err(LabError::invalid("no nodes left inside the probe margin"));
    }
    let mut lip: f64 = 0.0;
    for slice in &field.values {
        for &node in &nodes {
            for i in 0..g.dim() {
                let mut off = vec![0isize; g.dim()];
                off[i] = 1;
                let (p, clamped) = g.shifted(node, &off);
                if clamped || !inside[p] {
                    continue;
                }
                lip = lip.max((slice[p] - slice[node]).abs() / g.h(i));
            }
        }
    }
    let norms: Vec<f64> = nodes.iter().map(|&i| 1.0 + crate::model::norm(&g.coords(i))).collect();
    let dt = field.tgrid.dt();
    let mut lags = Vec::new();
    let mut m = 1;
    while m <= steps / 2 {
        let mut worst: f64 = 0.0;
        for k in 0..=steps - m {
            for (&node, nrm) in nodes.iter().zip(&norms) {
                worst = worst.max((field.values[k][node] - field.values[k + m][node]).abs() / nrm);
            }
        }
        lags.push((m as f64 * dt, worst));
        m *= 2;
    }
    let usable: Vec<&(f64, f64)> = lags.iter().filter(|l| l.1 > 1e-14).collect();
    let time_exponent = if usable.len() < 2 {
        f64::INFINITY
    } else {
        let xs: Vec<f64> = usable.iter().map(|l| l.0.ln()).collect();
        let ys: Vec<f64> = usable.iter().map(|l| l.1.ln()).collect();
        crate::stats::ls_slope(&xs, &ys)
    };
    Ok(RegularityReport { lipschitz_ratio: lip, time_exponent, lags })
}

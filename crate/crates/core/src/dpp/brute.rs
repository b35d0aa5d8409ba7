//! Exhaustive strategy enumeration for tiny binomial games.
//!
//! The discrete game lives on the binomial tree of `N` steps. A control
//! process assigns an index to every tree node. A nonanticipative strategy
//! for the responding player maps `(node, opponent indices along the path up
//! to and including this node)` to an own index. The lower value is
//! `min_β max_u J(u, β(u))`, the upper value `max_α min_v J(α(v), v)`, with
//! `J` the root value of the BSDE along the tree.

use rayon::prelude::*;

use super::Player;
use crate::bsde::{cost_j, solve_backward, BsdeOptions, Driver, TerminalData};
use crate::error::{LabError, Result};
use crate::model::{ControlGrid, GameSpec};
use crate::sde_sim::{simulate_lattice, LatticeTable, NoiseModel, TimeGrid};

pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

/// A game small enough to enumerate, started from one state.
#[derive(Debug, Clone)]
pub struct TinyGame<'a> {
    pub spec: &'a GameSpec,
    pub controls: &'a ControlGrid,
    pub grid: TimeGrid,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForceOptions {
    /// Cap on `strategies × opponent processes`.
    pub budget: u128,
    pub bsde: BsdeOptions,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        BruteForceOptions { budget: DEFAULT_ENUMERATION_BUDGET, bsde: BsdeOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyEntry {
    pub step: usize,
    /// Lattice history index of the node (see `sde_sim::lattice_history_index`).
    pub history: usize,
    /// Opponent indices at the node's ancestors and at the node itself.
    pub opponent: Vec<usize>,
    pub control: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyTable {
    pub player: Player,
    pub entries: Vec<StrategyEntry>,
}

impl StrategyTable {
    pub fn lookup(&self, step: usize, history: usize, opponent: &[usize]) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.step == step && e.history == history && e.opponent == opponent)
            .map(|e| e.control)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub lower: f64,
    pub upper: f64,
    /// Optimal `β` for the minimizer in the lower game.
    pub lower_strategy: StrategyTable,
    /// Optimal `α` for the maximizer in the upper game.
    pub upper_strategy: StrategyTable,
    /// Candidates examined per game.
    pub lower_candidates: u128,
    pub upper_candidates: u128,
}

/// Control nodes of the binomial tree, level by level.
struct Tree {
    steps: usize,
    branching: usize,
    offsets: Vec<usize>,
    total: usize,
}

impl Tree {
    fn new(steps: usize, d: usize) -> Self {
        let branching = 1usize << d;
        let mut offsets = Vec::with_capacity(steps + 1);
        let mut acc = 0;
        for k in 0..steps {
            offsets.push(acc);
            acc += branching.pow(k as u32);
        }
        Tree { steps, branching, offsets, total: acc }
    }

    fn level_of(&self, node: usize) -> (usize, usize) {
        let k = self.offsets.iter().rposition(|&o| o <= node).expect("node inside tree");
        (k, node - self.offsets[k])
    }

    /// Node ids from the root down to `(k, h)`.
    fn path(&self, k: usize, h: usize) -> Vec<usize> {
        (0..=k).map(|m| self.offsets[m] + h / self.branching.pow((k - m) as u32)).collect()
    }
}

fn digits(mut idx: u128, base: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let d = (idx % base as u128) as usize;
            idx /= base as u128;
            d
        })
        .collect()
}

fn pow_checked(base: usize, exp: usize) -> u128 {
    (0..exp).fold(1u128, |acc, _| acc.saturating_mul(base as u128))
}

/// Per-node strategy keys: node `(k, h)` owns `n_opp^{k+1}` consecutive keys.
struct Keys {
    offsets: Vec<usize>,
    total: usize,
}

impl Keys {
    fn new(tree: &Tree, n_opp: usize) -> Self {
        let mut offsets = Vec::with_capacity(tree.total);
        let mut acc = 0usize;
        for node in 0..tree.total {
            offsets.push(acc);
            let (k, _) = tree.level_of(node);
            acc = acc.saturating_add(n_opp.saturating_pow(k as u32 + 1));
        }
        Keys { offsets, total: acc }
    }
}

/// Enumerates `opt_s opp_o J` with the responder reading opponent histories.
struct Enumeration<'a> {
    tree: &'a Tree,
    keys: Keys,
    n_own: usize,
    n_opp: usize,
    strategies: u128,
    processes: u128,
    paths: Vec<Vec<usize>>,
}

impl<'a> Enumeration<'a> {
    fn new(tree: &'a Tree, n_own: usize, n_opp: usize, budget: u128) -> Result<Self> {
        let keys = Keys::new(tree, n_opp);
        let strategies = pow_checked(n_own, keys.total);
        let processes = pow_checked(n_opp, tree.total);
        let required = strategies.saturating_mul(processes);
        if required > budget {
            return Err(LabError::EnumerationBudget { required, budget });
        }
        let paths = (0..tree.total)
            .map(|node| {
                let (k, h) = tree.level_of(node);
                tree.path(k, h)
            })
            .collect();
        Ok(Enumeration { tree, keys, n_own, n_opp, strategies, processes, paths })
    }

    /// Own index per node when strategy digits `s` answer opponent process `o`.
    fn respond(&self, s: &[usize], o: &[usize]) -> Vec<usize> {
        (0..self.tree.total)
            .map(|node| {
                let key = self.paths[node]
                    .iter()
                    .enumerate()
                    .map(|(pos, &anc)| o[anc] * self.n_opp.pow(pos as u32))
                    .sum::<usize>();
                s[self.keys.offsets[node] + key]
            })
            .collect()
    }

    /// `outer_min`: the strategy player minimizes (lower game).
    fn solve(&self, outer_min: bool, value: &(dyn Fn(&[usize], &[usize]) -> f64 + Sync)) -> (f64, u128) {
        let candidate = |s_idx: u128| -> (f64, u128) {
            let s = digits(s_idx, self.n_own, self.keys.total);
            let mut inner = if outer_min { f64::NEG_INFINITY } else { f64::INFINITY };
            for p in 0..self.processes {
                let o = digits(p, self.n_opp, self.tree.total);
                let own = self.respond(&s, &o);
                let j = value(&own, &o);
                inner = if outer_min { inner.max(j) } else { inner.min(j) };
            }
            (inner, s_idx)
        };
        let better = move |a: (f64, u128), b: (f64, u128)| {
            let a_wins = if outer_min { a.0 < b.0 } else { a.0 > b.0 };
            if a_wins || (a.0 == b.0 && a.1 < b.1) {
                a
            } else {
                b
            }
        };
        let init = if outer_min { (f64::INFINITY, u128::MAX) } else { (f64::NEG_INFINITY, u128::MAX) };
        (0..self.strategies as u64)
            .into_par_iter()
            .map(|s| candidate(s as u128))
            .reduce(|| init, better)
    }

    fn table(&self, player: Player, s_idx: u128) -> StrategyTable {
        let s = digits(s_idx, self.n_own, self.keys.total);
        let mut entries = Vec::with_capacity(self.keys.total);
        for node in 0..self.tree.total {
            let (k, h) = self.tree.level_of(node);
            for key in 0..self.n_opp.pow(k as u32 + 1) {
                entries.push(StrategyEntry {
                    step: k,
                    history: h,
                    opponent: digits(key as u128, self.n_opp, k + 1),
                    control: s[self.keys.offsets[node] + key],
                });
            }
        }
        StrategyTable { player, entries }
    }
}

fn lattice_tables(tree: &Tree, d: usize, u: &[usize], v: &[usize]) -> (LatticeTable, LatticeTable) {
    let split = |c: &[usize]| -> Vec<Vec<usize>> {
        (0..tree.steps).map(|k| c[tree.offsets[k]..tree.offsets[k] + tree.branching.pow(k as u32)].to_vec()).collect()
    };
    (LatticeTable { dim_noise: d, table: split(u) }, LatticeTable { dim_noise: d, table: split(v) })
}

fn check_tiny(game: &TinyGame) -> Result<Tree> {
    if game.grid.steps > 3 {
        return Err(LabError::invalid("strategy enumeration is limited to at most 3 steps"));
    }
    if game.x0.len() != game.spec.dim_state {
        return Err(LabError::invalid("initial state dimension does not match the game"));
    }
    Ok(Tree::new(game.grid.steps, game.spec.dim_noise))
}

/// Lower and upper values of the discrete game by exhaustive enumeration.
pub fn brute_force_game(game: &TinyGame, opts: &BruteForceOptions) -> Result<BruteForceResult> {
    let tree = check_tiny(game)?;
    let (nu, nv) = (game.controls.nu(), game.controls.nv());
    let lower_enum = Enumeration::new(&tree, nv, nu, opts.budget)?;
    let upper_enum = Enumeration::new(&tree, nu, nv, opts.budget)?;

    // J for every joint control table, indexed by Σ (u·nv + v)·(nu·nv)^node
    let tables = pow_checked(nu * nv, tree.total);
    if tables > opts.budget {
        return Err(LabError::EnumerationBudget { required: tables, budget: opts.budget });
    }
    let node_budget = tree.total * tree.branching + tree.branching.pow(tree.steps as u32) + 1;
    let d = game.spec.dim_noise;
    let costs: Vec<f64> = (0..tables as u64)
        .into_par_iter()
        .map(|idx| {
            let pairs = digits(idx as u128, nu * nv, tree.total);
            let u: Vec<usize> = pairs.iter().map(|p| p / nv).collect();
            let v: Vec<usize> = pairs.iter().map(|p| p % nv).collect();
            let (ut, vt) = lattice_tables(&tree, d, &u, &v);
            cost_j(
                game.spec,
                game.controls,
                &game.grid,
                &NoiseModel::Binomial { node_budget },
                &game.x0,
                &ut,
                &vt,
                &opts.bsde,
            )
        })
        .collect::<Result<_>>()?;
    let joint = |u: &[usize], v: &[usize]| -> f64 {
        let mut idx = 0usize;
        for node in (0..tree.total).rev() {
            idx = idx * nu * nv + u[node] * nv + v[node];
        }
        costs[idx]
    };

    let (lower, lower_idx) = lower_enum.solve(true, &|v, u| joint(u, v));
    let (upper, upper_idx) = upper_enum.solve(false, &|u, v| joint(u, v));
    Ok(BruteForceResult {
        lower,
        upper,
        lower_strategy: lower_enum.table(Player::Minimizer, lower_idx),
        upper_strategy: upper_enum.table(Player::Maximizer, upper_idx),
        lower_candidates: lower_enum.strategies * lower_enum.processes,
        upper_candidates: upper_enum.strategies * upper_enum.processes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationReport {
    pub brute_lower: f64,
    pub expectation_lower: f64,
    pub difference: f64,
    pub passed: bool,
}

/// Recomputes the lower value with `E[J]` in place of `J`, solving a fresh
/// BSDE for every candidate, and compares with [`brute_force_game`].
pub fn expectation_formulation_check(game: &TinyGame, opts: &BruteForceOptions) -> Result<ExpectationReport> {
    let brute = brute_force_game(game, opts)?;
    let tree = check_tiny(game)?;
    let (nu, nv) = (game.controls.nu(), game.controls.nv());
    let d = game.spec.dim_noise;
    let en = Enumeration::new(&tree, nv, nu, opts.budget)?;
    let node_budget = tree.total * tree.branching + tree.branching.pow(tree.steps as u32) + 1;
    let expected = |v: &[usize], u: &[usize]| -> f64 {
        let (ut, vt) = lattice_tables(&tree, d, u, v);
        let run = || -> Result<f64> {
            let bundle = simulate_lattice(
                game.spec,
                game.controls,
                &game.grid,
                &[(game.x0.clone(), 1.0)],
                &ut,
                &vt,
                node_budget,
            )?;
            let xi = TerminalData::terminal_payoff(game.spec, &bundle)?;
            let sol = solve_backward(game.spec, game.controls, &bundle, &xi, Driver::Game, &opts.bsde)?;
            Ok(sol.y[0].iter().zip(bundle.weights(0)).map(|(y, w)| y * w).sum())
        };
        run().unwrap_or(f64::NAN)
    };
    let (expectation_lower, _) = en.solve(true, &expected);
    if !expectation_lower.is_finite() {
        return Err(LabError::invalid("expectation enumeration produced a non-finite value"));
    }
    let difference = (expectation_lower - brute.lower).abs();
    Ok(ExpectationReport { brute_lower: brute.lower, expectation_lower, difference, passed: difference <= 1e-12 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matching_pennies(dt: f64) -> (GameSpec, ControlGrid, TimeGrid) {
        let spec = GameSpec::new(1, 1, dt).unwrap().with_driver(|_, _, _, _, u, v| u[0] * v[0]);
        let controls = ControlGrid::scalar(&[-1.0, 1.0], &[-1.0, 1.0]).unwrap();
        (spec, controls, TimeGrid::new(0.0, dt, 1).unwrap())
    }

    #[test]
    fn one_simultaneous_move() {
        let (spec, controls, grid) = matching_pennies(1.0);
        let game = TinyGame { spec: &spec, controls: &controls, grid, x0: vec![0.0] };
        let r = brute_force_game(&game, &BruteForceOptions::default()).unwrap();
        assert_eq!((r.lower, r.upper), (-1.0, 1.0));
        assert_eq!(r.lower_candidates, 4 * 2);
        // β answers u = −1 with v = +1 and u = +1 with v = −1
        assert_eq!(r.lower_strategy.lookup(0, 0, &[0]), Some(1));
        assert_eq!(r.lower_strategy.lookup(0, 0, &[1]), Some(0));
    }

    #[test]
    fn single_point_controls_give_cost() {
        let spec = GameSpec::new(1, 1, 1.0)
            .unwrap()
            .with_diffusion(|_, _, _, _, s| s[0] = 1.0)
            .with_terminal(|x| x[0] * x[0]);
        let controls = ControlGrid::single();
        let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let game = TinyGame { spec: &spec, controls: &controls, grid, x0: vec![0.0] };
        let r = brute_force_game(&game, &BruteForceOptions::default()).unwrap();
        assert!((r.lower - 1.0).abs() < 1e-12 && (r.upper - 1.0).abs() < 1e-12);
    }

    #[test]
    fn budget_refusal_reports_requirement() {
        let spec = GameSpec::new(1, 1, 1.0).unwrap();
        let controls = ControlGrid::scalar(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let game = TinyGame { spec: &spec, controls: &controls, grid, x0: vec![0.0] };
        match brute_force_game(&game, &BruteForceOptions::default()) {
            Err(LabError::EnumerationBudget { required, budget }) => {
                assert!(required > budget);
                assert_eq!(budget, DEFAULT_ENUMERATION_BUDGET);
            }
            other => panic!("expected budget refusal, got {other:?}"),
        }
    }

    #[test]
    fn expectation_matches_on_pennies() {
        let (spec, controls, grid) = matching_pennies(0.5);
        let game = TinyGame { spec: &spec, controls: &controls, grid, x0: vec![0.0] };
        let r = expectation_formulation_check(&game, &BruteForceOptions::default()).unwrap();
        assert!(r.passed && (r.brute_lower + 0.5).abs() < 1e-15);
    }

    #[test]
    fn tree_paths() {
        let t = Tree::new(3, 1);
        assert_eq!(t.total, 7);
        assert_eq!(t.level_of(4), (2, 1));
        assert_eq!(t.path(2, 3), vec![0, 2, 6]);
    }
}

//! Seeded instance generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use isaacs_core::dpp::{Axis, BoundaryPolicy, StateGrid};
use isaacs_core::games::{build, Benchmark};
use isaacs_core::model::{ControlGrid, GameSpec, Monomial, Polynomial};
use isaacs_core::sde_sim::TimeGrid;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn bench(name: &str) -> Benchmark {
    build(name, &BTreeMap::new()).unwrap()
}

pub fn base_grids(b: &Benchmark) -> (StateGrid, TimeGrid) {
    (b.grid.state_grid(1).unwrap(), b.grid.time_grid(b.spec.horizon).unwrap())
}

/// `(h/2, Δt/4)` version of a grid pair.
pub fn refine(s: &StateGrid, t: &TimeGrid) -> (StateGrid, TimeGrid) {
    let axes = s.axes().iter().map(|a| Axis::new(a.min, a.max, 2 * (a.nodes - 1) + 1).unwrap()).collect();
    (StateGrid::new(axes, s.policy()).unwrap(), TimeGrid::new(t.t0, t.t1, 4 * t.steps).unwrap())
}

/// Distinct scalar control values drawn from `pool`.
pub fn pick(rng: &mut ChaCha8Rng, pool: &[f64], n: usize) -> Vec<f64> {
    let mut p = pool.to_vec();
    p.shuffle(rng);
    p.truncate(n);
    p.sort_by(f64::total_cmp);
    p
}

/// Smooth scalar game whose driver has `(y, z)` Lipschitz constant at most
/// `lyz`. Returns the spec with both Lipschitz fields set.
pub fn random_game(rng: &mut ChaCha8Rng, horizon: f64, lyz: f64) -> GameSpec {
    let [b0, b1, b2, b3]: [f64; 4] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    let s0 = rng.random_range(0.5..1.0);
    let s1 = rng.random_range(-0.2..0.2);
    let share = rng.random_range(0.0..1.0);
    let ly = lyz * share * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let lz = lyz * (1.0 - share);
    let [c0, c1, c2]: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let [p0, p1]: [f64; 2] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    GameSpec::new(1, 1, horizon)
        .unwrap()
        .with_drift(move |_, x, u, v, b| b[0] = b0 + b1 * x[0].sin() + b2 * u[0] + b3 * v[0])
        .with_diffusion(move |_, x, _, _, s| s[0] = s0 + s1 * x[0].cos())
        .with_driver(move |t, x, y, z, u, v| ly * y + lz * z[0].sin() + c0 * x[0].cos() * u[0] * v[0] + c1 * u[0] + c2 * t * v[0])
        .with_terminal(move |x| p0 * x[0].sin() + p1 * (0.5 * x[0]).cos())
        .with_lipschitz(lyz.max(1.0) + 1.0)
        .with_driver_lipschitz(lyz)
}

pub fn random_controls(rng: &mut ChaCha8Rng) -> ControlGrid {
    let pool = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let nu = rng.random_range(1..=3);
    let nv = rng.random_range(1..=3);
    ControlGrid::scalar(&pick(rng, &pool, nu), &pick(rng, &pool, nv)).unwrap()
}

/// `a + b t + c x + q x² + e t² + r t x + s x³/6` with moderate coefficients.
pub fn random_poly(rng: &mut ChaCha8Rng) -> Polynomial {
    let mut c = || rng.random_range(-1.0..1.0);
    let terms = vec![
        Monomial { coef: c(), t_pow: 0, x_pows: vec![0] },
        Monomial { coef: c(), t_pow: 1, x_pows: vec![0] },
        Monomial { coef: c(), t_pow: 0, x_pows: vec![1] },
        Monomial { coef: c(), t_pow: 0, x_pows: vec![2] },
        Monomial { coef: c(), t_pow: 2, x_pows: vec![0] },
        Monomial { coef: c(), t_pow: 1, x_pows: vec![1] },
        Monomial { coef: c() / 6.0, t_pow: 0, x_pows: vec![3] },
    ];
    Polynomial::new(1, terms).unwrap()
}

/// A 1–2 step game whose lattice moves land exactly on a grid of spacing
/// `h = 0.125` (Δt = 0.25, σ√Δt and bΔt multiples of h).
pub struct AlignedGame {
    pub spec: GameSpec,
    pub controls: ControlGrid,
    pub sgrid: StateGrid,
    pub tgrid: TimeGrid,
    pub x0: Vec<f64>,
}

pub const ALIGNED_DT: f64 = 0.25;
pub const ALIGNED_H: f64 = 0.125;

pub fn aligned_game(rng: &mut ChaCha8Rng, steps: usize, nu: usize, nv: usize) -> AlignedGame {
    let horizon = steps as f64 * ALIGNED_DT;
    let sigma = if rng.random_bool(0.5) { 0.5 } else { 1.0 };
    let p = rng.random_range(0..=2) as f64;
    let q = rng.random_range(0..=2) as f64;
    let [a, c, e, g, k]: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let ly = rng.random_range(-0.25..0.25);
    let lz = rng.random_range(-0.25..0.25);
    let [alpha, beta, gamma]: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0), rng.random_range(-0.3..0.3)];
    let spec = GameSpec::new(1, 1, horizon)
        .unwrap()
        .with_drift(move |_, _, u, v, b| b[0] = 0.5 * (p * u[0] + q * v[0]))
        .with_diffusion(move |_, _, _, _, s| s[0] = sigma)
        .with_driver(move |t, x, y, z, u, v| {
            a * u[0] * v[0] + c * u[0] + e * v[0] + g * x[0].sin() + ly * y + lz * z[0] + k * t * x[0]
        })
        .with_terminal(move |x| alpha * (beta * x[0]).sin() + gamma * x[0] * x[0])
        .with_lipschitz(2.0)
        .with_driver_lipschitz(ly.abs() + lz.abs());
    let pool = [-1.0, 0.0, 1.0];
    let controls = ControlGrid::scalar(&pick(rng, &pool, nu), &pick(rng, &pool, nv)).unwrap();
    let sgrid = StateGrid::new(vec![Axis::with_spacing(-4.0, 4.0, ALIGNED_H).unwrap()], BoundaryPolicy::Clamp).unwrap();
    let tgrid = TimeGrid::new(0.0, horizon, steps).unwrap();
    let x0 = vec![ALIGNED_H * rng.random_range(-8..=8) as f64];
    AlignedGame { spec, controls, sgrid, tgrid, x0 }
}

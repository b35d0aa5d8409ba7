use isaacs_core::bsde::{
    comparison_oracle, cost_j, partition_mixing_check, semigroup_g, solve_backward, stability_estimate_check, BsdeOptions,
    Driver, DriverPoint, Instance, PerturbedInstance, TerminalData,
};
use isaacs_core::model::{ControlGrid, GameSpec};
use isaacs_core::sde_sim::{moment_check, simulate, Constant, NoiseModel, TimeGrid, DEFAULT_NODE_BUDGET};

fn brownian(horizon: f64) -> GameSpec {
    GameSpec::new(1, 1, horizon).unwrap().with_diffusion(|_, _, _, _, s| s[0] = 1.0)
}

fn lattice(spec: &GameSpec, steps: usize, x0: f64) -> isaacs_core::sde_sim::PathBundle {
    let grid = TimeGrid::new(0.0, spec.horizon, steps).unwrap();
    simulate(spec, &ControlGrid::single(), &grid, &NoiseModel::binomial(), &[x0], &Constant(0), &Constant(0)).unwrap()
}

#[test]
fn sup_increment_moment_scales_linearly_in_delta() {
    // Brownian scaling: E sup|B|² over [0, δ] is proportional to δ
    let spec = brownian(0.1);
    let grid = TimeGrid::new(0.0, 0.1, 40).unwrap();
    let bundle = simulate(&spec, &ControlGrid::single(), &grid, &NoiseModel::gaussian(100_000, 7), &[0.0], &Constant(0), &Constant(0)).unwrap();
    let r = moment_check(&bundle, &[0.0], 2).unwrap();
    let slope = r.fitted_exponent.unwrap();
    assert!((0.7..=1.3).contains(&slope), "slope {slope}");
    assert!(!r.flagged);
}

/// RK4 on `dy/dτ = −y`, `y(0) = 1`, over `[0, 1]`.
fn linear_ode_oracle() -> f64 {
    let (n, mut y) = (1000, 1.0f64);
    let h = 1.0 / n as f64;
    for _ in 0..n {
        let k1 = -y;
        let k2 = -(y + 0.5 * h * k1);
        let k3 = -(y + 0.5 * h * k2);
        let k4 = -(y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    y
}

#[test]
fn linear_driver_decays_like_the_ode() {
    let spec = brownian(1.0);
    let b = lattice(&spec, 64, 0.0);
    let xi = TerminalData::from_fn(&b, |_| 1.0);
    let g = |p: &DriverPoint| -p.y;
    let s = solve_backward(&spec, &ControlGrid::single(), &b, &xi, Driver::Custom(&g), &BsdeOptions::default()).unwrap();
    assert!((s.y[0][0] - linear_ode_oracle()).abs() <= 0.01);
}

#[test]
fn zero_driver_semigroup_is_child_average() {
    let spec = brownian(0.5);
    let b = lattice(&spec, 1, 0.3);
    let eta = TerminalData(b.lattice().unwrap().levels[1].iter().map(|n| n.x[0].powi(3)).collect());
    let g = semigroup_g(&spec, &ControlGrid::single(), &b, &eta, Driver::Game, &BsdeOptions::default()).unwrap();
    let mean = eta.0.iter().sum::<f64>() / eta.0.len() as f64;
    assert!((g[0] - mean).abs() < 1e-15);
}

#[test]
fn full_horizon_semigroup_is_the_cost() {
    let spec = brownian(1.0).with_terminal(|x| x[0].sin()).with_driver(|_, x, y, z, _, _| 0.3 * y - 0.2 * z[0] + x[0].cos());
    let grid = TimeGrid::new(0.0, 1.0, 6).unwrap();
    let b = lattice(&spec, 6, 0.1);
    let xi = TerminalData::terminal_payoff(&spec, &b).unwrap();
    let g = semigroup_g(&spec, &ControlGrid::single(), &b, &xi, Driver::Game, &BsdeOptions::default()).unwrap();
    let j = cost_j(&spec, &ControlGrid::single(), &grid, &NoiseModel::binomial(), &[0.1], &Constant(0), &Constant(0), &BsdeOptions::default()).unwrap();
    assert_eq!(g[0], j);
}

#[test]
fn cost_examples() {
    let opts = BsdeOptions::default();
    let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
    let k = GameSpec::new(1, 1, 1.0).unwrap().with_terminal(|_| 2.5);
    let single = ControlGrid::single();
    assert_eq!(cost_j(&k, &single, &grid, &NoiseModel::binomial(), &[0.0], &Constant(0), &Constant(0), &opts).unwrap(), 2.5);

    let uv = GameSpec::new(1, 1, 0.7).unwrap().with_driver(|_, _, _, _, u, v| u[0] * v[0]);
    let ones = ControlGrid::scalar(&[1.0], &[1.0]).unwrap();
    let g7 = TimeGrid::new(0.0, 0.7, 7).unwrap();
    let j = cost_j(&uv, &ones, &g7, &NoiseModel::binomial(), &[0.0], &Constant(0), &Constant(0), &opts).unwrap();
    assert!((j - 0.7).abs() < 1e-14);

    let sq = brownian(1.0).with_terminal(|x| x[0] * x[0]);
    let j = cost_j(&sq, &single, &grid, &NoiseModel::binomial(), &[0.0], &Constant(0), &Constant(0), &opts).unwrap();
    assert!((j - 1.0).abs() <= 0.02);
}

#[test]
fn comparison_examples() {
    let spec = brownian(1.0).with_terminal(|x| x[0].cos()).with_driver(|_, _, y, z, _, _| 0.5 * y.sin() + 0.3 * z[0]).with_lipschitz(1.0);
    let b = lattice(&spec, 6, 0.0);
    let xi = TerminalData::terminal_payoff(&spec, &b).unwrap();
    let opts = BsdeOptions::default();
    let same = comparison_oracle(
        &spec,
        &ControlGrid::single(),
        &b,
        Instance { terminal: &xi, driver: Driver::Game },
        Instance { terminal: &xi, driver: Driver::Game },
        &opts,
    )
    .unwrap();
    assert!(same.passed && same.root_gap == 0.0);

    let shifted = TerminalData(xi.0.iter().map(|x| x + 1.0).collect());
    let r = comparison_oracle(
        &spec,
        &ControlGrid::single(),
        &b,
        Instance { terminal: &shifted, driver: Driver::Game },
        Instance { terminal: &xi, driver: Driver::Game },
        &opts,
    )
    .unwrap();
    assert!(r.passed);
    assert!(r.root_gap > 0.0 && r.root_gap <= (spec.lipschitz_const * spec.horizon).exp());
}

#[test]
fn stability_examples() {
    let spec = brownian(1.0).with_driver(|_, _, y, _, _, _| -y).with_lipschitz(1.0);
    let b = lattice(&spec, 5, 0.0);
    let opts = BsdeOptions::default();
    let zero_phi: Vec<Vec<f64>> = (0..5).map(|k| vec![0.0; b.width(k)]).collect();
    let base = PerturbedInstance { terminal: TerminalData::from_fn(&b, |x| x[0]), phi: zero_phi.clone() };
    let r = stability_estimate_check(&spec, &ControlGrid::single(), &b, Driver::Game, &base, &base, &opts).unwrap();
    assert!(r.passed && r.root_lhs == 0.0 && r.root_bound == 0.0);

    let eps = 0.1;
    let moved = PerturbedInstance { terminal: TerminalData::from_fn(&b, |x| x[0] + eps), phi: zero_phi };
    let r = stability_estimate_check(&spec, &ControlGrid::single(), &b, Driver::Game, &moved, &base, &opts).unwrap();
    assert!(r.passed);
    assert!(r.root_lhs <= eps * eps * (r.beta * spec.horizon).exp());
    assert!(r.root_bound - r.root_lhs > 0.0);
}

#[test]
fn partition_examples() {
    let opts = BsdeOptions::default();
    let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
    let spec = brownian(1.0).with_terminal(|x| x[0] * x[0]);
    let single = ControlGrid::single();
    let one = partition_mixing_check(&spec, &single, &grid, &[(vec![0.2], 1.0)], &Constant(0), &Constant(0), Driver::Game, DEFAULT_NODE_BUDGET, &opts).unwrap();
    assert!(one.passed && one.mixed_value == one.separate_roots[0]);

    let two = partition_mixing_check(
        &spec,
        &single,
        &grid,
        &[(vec![-1.0], 0.5), (vec![1.0], 0.5)],
        &Constant(0),
        &Constant(0),
        Driver::Game,
        DEFAULT_NODE_BUDGET,
        &opts,
    )
    .unwrap();
    // E[(x + B_1)²] = x² + 1 on both points
    assert!(two.passed && (two.mixed_value - 2.0).abs() < 1e-12);

    let decay = spec.clone().with_driver(|_, _, y, _, _, _| -y).with_lipschitz(1.0);
    let three = partition_mixing_check(
        &decay,
        &single,
        &grid,
        &[(vec![-0.5], 0.2), (vec![0.0], 0.5), (vec![0.7], 0.3)],
        &Constant(0),
        &Constant(0),
        Driver::Game,
        DEFAULT_NODE_BUDGET,
        &opts,
    )
    .unwrap();
    assert!(three.passed, "{three:?}");
}

//! Game instances and the Hamiltonian-type scalar functions built on them.
//!
//! A [`GameSpec`] bundles the controlled dynamics `dX = b dt + σ dB`, the
//! running cost `f(t, x, y, z, u, v)` of the payoff BSDE and the terminal
//! cost `Φ`. Control sets are always finite ([`ControlGrid`]), so every
//! sup/inf in this crate is an exact scan with first-index tie-breaking.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};

/// `b(t, x, u, v)` written into an `n`-vector.
pub type DriftFn = dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `σ(t, x, u, v)` written row-major into an `n × d` buffer.
pub type DiffusionFn = dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `f(t, x, y, z, u, v)`.
pub type DriverFn = dyn Fn(f64, &[f64], f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync;
/// `Φ(x)`.
pub type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Coefficient bundle of one game instance.
#[derive(Clone)]
pub struct GameSpec {
    pub name: String,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub horizon: f64,
    pub drift: Arc<DriftFn>,
    pub diffusion: Arc<DiffusionFn>,
    pub driver: Arc<DriverFn>,
    pub terminal: Arc<TerminalFn>,
    /// Joint Lipschitz constant of b, σ in x, f in (x, y, z) and Φ in x.
    pub lipschitz_const: f64,
    /// Lipschitz constant of f in (y, z) alone, when it is known to be
    /// smaller than `lipschitz_const`. Only monotonicity guards use it.
    pub driver_lipschitz: Option<f64>,
}

impl fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameSpec")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("horizon", &self.horizon)
            .field("lipschitz_const", &self.lipschitz_const)
            .field("driver_lipschitz", &self.driver_lipschitz)
            .finish_non_exhaustive()
    }
}

impl GameSpec {
    /// A game with all coefficients identically zero.
    pub fn new(dim_state: usize, dim_noise: usize, horizon: f64) -> Result<Self> {
        if dim_state == 0 || dim_noise == 0 {
            return Err(LabError::invalid("state and noise dimensions must be positive"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(LabError::invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(GameSpec {
            name: "custom".to_string(),
            dim_state,
            dim_noise,
            horizon,
            drift: Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)),
            diffusion: Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)),
            driver: Arc::new(|_, _, _, _, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
            lipschitz_const: 0.0,
            driver_lipschitz: None,
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_drift<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_driver<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.driver = Arc::new(f);
        self
    }

    pub fn with_terminal<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.terminal = Arc::new(f);
        self
    }

    pub fn with_lipschitz(mut self, c: f64) -> Self {
        self.lipschitz_const = c;
        self
    }

    pub fn with_driver_lipschitz(mut self, c: f64) -> Self {
        self.driver_lipschitz = Some(c);
        self
    }

    /// Lipschitz constant of the driver in (y, z) used by monotonicity guards.
    pub fn yz_lipschitz(&self) -> f64 {
        self.driver_lipschitz.unwrap_or(self.lipschitz_const)
    }

    pub fn drift_at(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        (self.drift)(t, x, u, v, out);
        if out.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(coefficient_failure("drift", t, x, u, v))
        }
    }

    pub fn diffusion_at(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        (self.diffusion)(t, x, u, v, out);
        if out.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(coefficient_failure("diffusion", t, x, u, v))
        }
    }

    pub fn driver_at(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], v: &[f64]) -> Result<f64> {
        let value = (self.driver)(t, x, y, z, u, v);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(coefficient_failure("driver", t, x, u, v))
        }
    }

    pub fn terminal_at(&self, x: &[f64]) -> Result<f64> {
        let value = (self.terminal)(x);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(coefficient_failure("terminal", self.horizon, x, &[], &[]))
        }
    }
}

fn coefficient_failure(what: &'static str, t: f64, x: &[f64], u: &[f64], v: &[f64]) -> LabError {
    LabError::Coefficient {
        coefficient: what,
        t,
        x: x.to_vec(),
        u: u.to_vec(),
        v: v.to_vec(),
    }
}

/// Finite discretizations of the control sets U and V.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub u_points: Vec<Vec<f64>>,
    pub v_points: Vec<Vec<f64>>,
}

impl ControlGrid {
    pub fn new(u_points: Vec<Vec<f64>>, v_points: Vec<Vec<f64>>) -> Result<Self> {
        for (name, pts) in [("u_points", &u_points), ("v_points", &v_points)] {
            if pts.is_empty() {
                return Err(LabError::invalid(format!("{name} must be non-empty")));
            }
            for (i, a) in pts.iter().enumerate() {
                if pts[..i].iter().any(|b| b == a) {
                    return Err(LabError::invalid(format!("{name} contains duplicate point {a:?}")));
                }
            }
        }
        Ok(ControlGrid { u_points, v_points })
    }

    /// One-dimensional control points for both players.
    pub fn scalar(u: &[f64], v: &[f64]) -> Result<Self> {
        Self::new(
            u.iter().map(|&p| vec![p]).collect(),
            v.iter().map(|&p| vec![p]).collect(),
        )
    }

    pub fn single() -> Self {
        ControlGrid {
            u_points: vec![vec![0.0]],
            v_points: vec![vec![0.0]],
        }
    }

    pub fn u(&self, i: usize) -> &[f64] {
        &self.u_points[i]
    }

    pub fn v(&self, j: usize) -> &[f64] {
        &self.v_points[j]
    }

    pub fn nu(&self) -> usize {
        self.u_points.len()
    }

    pub fn nv(&self) -> usize {
        self.v_points.len()
    }
}

/// Point `(t, x, y, p, X)` at which Hamiltonians are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianArgs {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub p: Vec<f64>,
    /// Symmetric `n × n` matrix, row-major.
    pub hessian: Vec<f64>,
}

impl HamiltonianArgs {
    pub fn new(t: f64, x: Vec<f64>, y: f64, p: Vec<f64>, hessian: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if p.len() != n || hessian.len() != n * n {
            return Err(LabError::invalid("hamiltonian arguments have inconsistent dimensions"));
        }
        for i in 0..n {
            for j in 0..i {
                if (hessian[i * n + j] - hessian[j * n + i]).abs() > 1e-12 {
                    return Err(LabError::invalid(format!(
                        "hessian is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(HamiltonianArgs { t, x, y, p, hessian })
    }
}

/// Outcome of a finite sup-inf (or inf-sup) scan.
///
/// For the lower Hamiltonian `outer` indexes `u` (the maximizer) and `inner`
/// the minimizing `v` against it; for the upper Hamiltonian the roles swap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddleScan {
    pub value: f64,
    pub outer: usize,
    pub inner: usize,
}

/// `max_i min_j h(i, j)`, first index on ties.
pub fn sup_inf<F>(nu: usize, nv: usize, mut h: F) -> Result<SaddleScan>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let mut best = SaddleScan { value: f64::NEG_INFINITY, outer: 0, inner: 0 };
    for i in 0..nu {
        let mut inner = (f64::INFINITY, 0);
        for j in 0..nv {
            let val = h(i, j)?;
            if val < inner.0 {
                inner = (val, j);
            }
        }
        if inner.0 > best.value {
            best = SaddleScan { value: inner.0, outer: i, inner: inner.1 };
        }
    }
    Ok(best)
}

/// `min_j max_i h(i, j)`; `outer` is the minimizing `j`, `inner` the best `i`
/// against it.
pub fn inf_sup<F>(nu: usize, nv: usize, mut h: F) -> Result<SaddleScan>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let mut best = SaddleScan { value: f64::INFINITY, outer: 0, inner: 0 };
    for j in 0..nv {
        let mut inner = (f64::NEG_INFINITY, 0);
        for i in 0..nu {
            let val = h(i, j)?;
            if val > inner.0 {
                inner = (val, i);
            }
        }
        if inner.0 < best.value {
            best = SaddleScan { value: inner.0, outer: j, inner: inner.1 };
        }
    }
    Ok(best)
}

/// Reusable buffers for repeated coefficient evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
}

impl Scratch {
    pub fn new(n: usize, d: usize) -> Self {
        Scratch { b: vec![0.0; n], sigma: vec![0.0; n * d], z: vec![0.0; d] }
    }
}

/// `½ tr(σσᵀ X)` for row-major σ (n × d) and X (n × n).
pub(crate) fn half_trace(sigma: &[f64], hess: &[f64], n: usize, d: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let h = hess[i * n + j];
            if h == 0.0 {
                continue;
            }
            let mut a = 0.0;
            for k in 0..d {
                a += sigma[i * d + k] * sigma[j * d + k];
            }
            acc += a * h;
        }
    }
    0.5 * acc
}

/// `z_k = Σ_i p_i σ_ik`.
pub(crate) fn p_dot_sigma(p: &[f64], sigma: &[f64], d: usize, z: &mut [f64]) {
    z.fill(0.0);
    for (i, pi) in p.iter().enumerate() {
        for k in 0..d {
            z[k] += pi * sigma[i * d + k];
        }
    }
}

pub(crate) fn hamiltonian_with(
    spec: &GameSpec,
    args: &HamiltonianArgs,
    u: &[f64],
    v: &[f64],
    s: &mut Scratch,
) -> Result<f64> {
    let (n, d) = (spec.dim_state, spec.dim_noise);
    spec.drift_at(args.t, &args.x, u, v, &mut s.b)?;
    spec.diffusion_at(args.t, &args.x, u, v, &mut s.sigma)?;
    p_dot_sigma(&args.p, &s.sigma, d, &mut s.z);
    let drift: f64 = args.p.iter().zip(&s.b).map(|(p, b)| p * b).sum();
    let f = spec.driver_at(args.t, &args.x, args.y, &s.z, u, v)?;
    Ok(half_trace(&s.sigma, &args.hessian, n, d) + drift + f)
}

fn check_dims(spec: &GameSpec, args: &HamiltonianArgs) -> Result<()> {
    if args.x.len() != spec.dim_state {
        return Err(LabError::invalid(format!(
            "state has dimension {}, game expects {}",
            args.x.len(),
            spec.dim_state
        )));
    }
    Ok(())
}

/// `H(t,x,y,p,X,u,v) = ½tr(σσᵀX) + p·b + f(t, x, y, p·σ, u, v)`.
pub fn hamiltonian(spec: &GameSpec, args: &HamiltonianArgs, u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(spec, args)?;
    let mut s = Scratch::new(spec.dim_state, spec.dim_noise);
    hamiltonian_with(spec, args, u, v, &mut s)
}

/// `H⁻ = max_u min_v H`, returning `(value, u index, v index)`.
pub fn lower_hamiltonian(spec: &GameSpec, grid: &ControlGrid, args: &HamiltonianArgs) -> Result<SaddleScan> {
    check_dims(spec, args)?;
    let mut s = Scratch::new(spec.dim_state, spec.dim_noise);
    sup_inf(grid.nu(), grid.nv(), |i, j| hamiltonian_with(spec, args, grid.u(i), grid.v(j), &mut s))
}

/// `H⁺ = min_v max_u H`, returning `(value, v index, u index)`.
pub fn upper_hamiltonian(spec: &GameSpec, grid: &ControlGrid, args: &HamiltonianArgs) -> Result<SaddleScan> {
    check_dims(spec, args)?;
    let mut s = Scratch::new(spec.dim_state, spec.dim_noise);
    inf_sup(grid.nu(), grid.nv(), |i, j| hamiltonian_with(spec, args, grid.u(i), grid.v(j), &mut s))
}

/// `H⁺ − H⁻`, non-negative by the minimax inequality.
pub fn isaacs_gap(spec: &GameSpec, grid: &ControlGrid, args: &HamiltonianArgs) -> Result<f64> {
    let upper = upper_hamiltonian(spec, grid, args)?;
    let lower = lower_hamiltonian(spec, grid, args)?;
    Ok(upper.value - lower.value)
}

/// A smooth scalar test function with analytic derivatives.
pub trait TestFunction: Send + Sync {
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn time_derivative(&self, t: f64, x: &[f64]) -> f64;
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Row-major `n × n`.
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]);
}

/// `coef · t^t_pow · Π x_i^{x_pows[i]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub t_pow: u32,
    pub x_pows: Vec<u32>,
}

impl Monomial {
    fn degree(&self) -> u32 {
        self.t_pow + self.x_pows.iter().sum::<u32>()
    }
}

/// Polynomial in `(t, x)` of total degree at most 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: Vec<Monomial>,
}

fn powi(x: f64, k: u32) -> f64 {
    x.powi(k as i32)
}

impl Polynomial {
    pub const MAX_DEGREE: u32 = 3;

    pub fn new(dim: usize, terms: Vec<Monomial>) -> Result<Self> {
        for m in &terms {
            if m.x_pows.len() != dim {
                return Err(LabError::invalid("monomial exponent vector has wrong length"));
            }
            if m.degree() > Self::MAX_DEGREE {
                return Err(LabError::invalid(format!(
                    "monomial degree {} exceeds {}",
                    m.degree(),
                    Self::MAX_DEGREE
                )));
            }
        }
        Ok(Polynomial { dim, terms })
    }

    pub fn zero(dim: usize) -> Self {
        Polynomial { dim, terms: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    /// Appends `coef · t^t_pow · Π x_i^{x_pows[i]}`.
    pub fn term(mut self, coef: f64, t_pow: u32, x_pows: &[u32]) -> Result<Self> {
        self.terms.push(Monomial { coef, t_pow, x_pows: x_pows.to_vec() });
        Polynomial::new(self.dim, self.terms)
    }

    /// `a + b t + Σ c_i x_i + Σ q_i x_i² + e t²` in `dim` variables.
    pub fn quadratic(dim: usize, a: f64, b: f64, c: &[f64], q: &[f64], e: f64) -> Result<Self> {
        let mut terms = vec![
            Monomial { coef: a, t_pow: 0, x_pows: vec![0; dim] },
            Monomial { coef: b, t_pow: 1, x_pows: vec![0; dim] },
            Monomial { coef: e, t_pow: 2, x_pows: vec![0; dim] },
        ];
        for i in 0..dim {
            let mut lin = vec![0; dim];
            lin[i] = 1;
            terms.push(Monomial { coef: c[i], t_pow: 0, x_pows: lin });
            let mut sq = vec![0; dim];
            sq[i] = 2;
            terms.push(Monomial { coef: q[i], t_pow: 0, x_pows: sq });
        }
        Polynomial::new(dim, terms)
    }

    fn eval_monomial(m: &Monomial, t: f64, x: &[f64], dt: u32, dx: &[u32]) -> f64 {
        // derivative of t^a x^k: falling factorials
        fn fall(p: u32, k: u32) -> Option<f64> {
            if k > p {
                return None;
            }
            Some((0..k).map(|i| (p - i) as f64).product())
        }
        let mut acc = m.coef;
        match fall(m.t_pow, dt) {
            Some(c) => acc *= c * powi(t, m.t_pow - dt),
            None => return 0.0,
        }
        for (i, &p) in m.x_pows.iter().enumerate() {
            match fall(p, dx[i]) {
                Some(c) => acc *= c * powi(x[i], p - dx[i]),
                None => return 0.0,
            }
        }
        acc
    }

    fn eval(&self, t: f64, x: &[f64], dt: u32, dx: &[u32]) -> f64 {
        self.terms.iter().map(|m| Self::eval_monomial(m, t, x, dt, dx)).sum()
    }
}

impl TestFunction for Polynomial {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.eval(t, x, 0, &vec![0; self.dim])
    }

    fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        self.eval(t, x, 1, &vec![0; self.dim])
    }

    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut dx = vec![0; self.dim];
        for i in 0..self.dim {
            dx[i] = 1;
            out[i] = self.eval(t, x, 0, &dx);
            dx[i] = 0;
        }
    }

    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let n = self.dim;
        let mut dx = vec![0; n];
        for i in 0..n {
            for j in 0..n {
                dx[i] += 1;
                dx[j] += 1;
                out[i * n + j] = self.eval(t, x, 0, &dx);
                dx[i] -= 1;
                dx[j] -= 1;
            }
        }
    }
}

/// Derivatives of a test function at one point.
#[derive(Debug, Clone)]
pub(crate) struct Jet {
    pub value: f64,
    pub dt: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Jet {
    pub fn at(phi: &dyn TestFunction, t: f64, x: &[f64]) -> Self {
        let n = x.len();
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        phi.gradient(t, x, &mut grad);
        phi.hessian(t, x, &mut hess);
        Jet { value: phi.value(t, x), dt: phi.time_derivative(t, x), grad, hess }
    }
}

pub(crate) fn local_driver_with(
    spec: &GameSpec,
    jet: &Jet,
    s: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    u: &[f64],
    v: &[f64],
    sc: &mut Scratch,
) -> Result<f64> {
    let (n, d) = (spec.dim_state, spec.dim_noise);
    spec.drift_at(s, x, u, v, &mut sc.b)?;
    spec.diffusion_at(s, x, u, v, &mut sc.sigma)?;
    p_dot_sigma(&jet.grad, &sc.sigma, d, &mut sc.z);
    for (zk, shift) in sc.z.iter_mut().zip(z) {
        *zk += shift;
    }
    let drift: f64 = jet.grad.iter().zip(&sc.b).map(|(p, b)| p * b).sum();
    let f = spec.driver_at(s, x, y + jet.value, &sc.z, u, v)?;
    Ok(jet.dt + half_trace(&sc.sigma, &jet.hess, n, d) + drift + f)
}

/// `F(s,x,y,z,u,v) = ∂φ/∂s + ½tr(σσᵀD²φ) + Dφ·b + f(s, x, y + φ, z + Dφ·σ, u, v)`.
#[allow(clippy::too_many_arguments)]
pub fn local_driver_f(
    spec: &GameSpec,
    phi: &dyn TestFunction,
    s: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    u: &[f64],
    v: &[f64],
) -> Result<f64> {
    let jet = Jet::at(phi, s, x);
    let mut sc = Scratch::new(spec.dim_state, spec.dim_noise);
    local_driver_with(spec, &jet, s, x, y, z, u, v, &mut sc)
}

/// `F₁(s,x,y,z,u) = min_v F`, with the minimizing v index.
#[allow(clippy::too_many_arguments)]
pub fn f1(
    spec: &GameSpec,
    grid: &ControlGrid,
    phi: &dyn TestFunction,
    s: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    u: &[f64],
) -> Result<(f64, usize)> {
    let jet = Jet::at(phi, s, x);
    let mut sc = Scratch::new(spec.dim_state, spec.dim_noise);
    let mut best = (f64::INFINITY, 0);
    for j in 0..grid.nv() {
        let val = local_driver_with(spec, &jet, s, x, y, z, u, grid.v(j), &mut sc)?;
        if val < best.0 {
            best = (val, j);
        }
    }
    Ok(best)
}

/// `F₀(s,x,y,z) = max_u min_v F`.
pub fn f0(
    spec: &GameSpec,
    grid: &ControlGrid,
    phi: &dyn TestFunction,
    s: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
) -> Result<SaddleScan> {
    let jet = Jet::at(phi, s, x);
    let mut sc = Scratch::new(spec.dim_state, spec.dim_noise);
    sup_inf(grid.nu(), grid.nv(), |i, j| {
        local_driver_with(spec, &jet, s, x, y, z, grid.u(i), grid.v(j), &mut sc)
    })
}

/// Spot-check of the declared Lipschitz and growth bounds.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub samples: usize,
    /// Largest observed `(|Δb| + |Δσ|) / |Δx|`.
    pub max_lipschitz_ratio: f64,
    /// Largest observed `(|f(t,x,0,0,u,v)| + |Φ(x)|) / (1 + |x|)`.
    pub max_growth_ratio: f64,
    pub lipschitz_ok: bool,
    pub growth_ok: bool,
}

/// Samples states in `[-radius, radius]ⁿ`, times in `[0, T]` and all control
/// pairs, and compares against `spec.lipschitz_const`.
pub fn check_assumptions(
    spec: &GameSpec,
    grid: &ControlGrid,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    let (n, d) = (spec.dim_state, spec.dim_noise);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sc1 = Scratch::new(n, d);
    let mut sc2 = Scratch::new(n, d);
    let zero_z = vec![0.0; d];
    let mut lip: f64 = 0.0;
    let mut growth: f64 = 0.0;
    for _ in 0..samples {
        let t = rng.random::<f64>() * spec.horizon;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-radius..radius)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-radius..radius)).collect();
        let dx = norm(&x.iter().zip(&x2).map(|(a, b)| a - b).collect::<Vec<_>>());
        let i = rng.random_range(0..grid.nu());
        let j = rng.random_range(0..grid.nv());
        let (u, v) = (grid.u(i), grid.v(j));
        spec.drift_at(t, &x, u, v, &mut sc1.b)?;
        spec.drift_at(t, &x2, u, v, &mut sc2.b)?;
        spec.diffusion_at(t, &x, u, v, &mut sc1.sigma)?;
        spec.diffusion_at(t, &x2, u, v, &mut sc2.sigma)?;
        if dx > 1e-12 {
            let db = dist(&sc1.b, &sc2.b);
            let ds = dist(&sc1.sigma, &sc2.sigma);
            lip = lip.max((db + ds) / dx);
        }
        let g = spec.driver_at(t, &x, 0.0, &zero_z, u, v)?.abs() + spec.terminal_at(&x)?.abs();
        growth = growth.max(g / (1.0 + norm(&x)));
    }
    let slack = 1e-9;
    Ok(AssumptionReport {
        samples,
        max_lipschitz_ratio: lip,
        max_growth_ratio: growth,
        lipschitz_ok: lip <= spec.lipschitz_const + slack,
        growth_ok: growth <= spec.lipschitz_const + slack,
    })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args1(p: f64, xx: f64) -> HamiltonianArgs {
        HamiltonianArgs::new(0.3, vec![0.2], 0.0, vec![p], vec![xx]).unwrap()
    }

    fn bilinear() -> GameSpec {
        GameSpec::new(1, 1, 1.0).unwrap().with_driver(|_, _, _, _, u, v| u[0] * v[0])
    }

    #[test]
    fn zero_game_has_zero_hamiltonian() {
        let spec = GameSpec::new(2, 2, 1.0).unwrap();
        let args = HamiltonianArgs::new(0.1, vec![1.0, 2.0], 3.0, vec![1.0, -1.0], vec![1.0, 0.5, 0.5, 2.0]).unwrap();
        assert_eq!(hamiltonian(&spec, &args, &[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn unit_diffusion_trace_term() {
        let spec = GameSpec::new(1, 1, 1.0).unwrap().with_diffusion(|_, _, _, _, s| s[0] = 1.0);
        assert_eq!(hamiltonian(&spec, &args1(0.0, 2.0), &[0.0], &[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn drift_cancellation() {
        let spec = GameSpec::new(1, 1, 1.0).unwrap().with_drift(|_, _, u, v, b| b[0] = u[0] + v[0]);
        assert_eq!(hamiltonian(&spec, &args1(3.0, 0.0), &[1.0], &[-1.0]).unwrap(), 0.0);
    }

    #[test]
    fn bilinear_saddle_scans() {
        let spec = bilinear();
        let grid = ControlGrid::scalar(&[-1.0, 1.0], &[-1.0, 1.0]).unwrap();
        let a = args1(0.0, 0.0);
        let lo = lower_hamiltonian(&spec, &grid, &a).unwrap();
        assert_eq!((lo.value, lo.outer, lo.inner), (-1.0, 0, 1));
        let up = upper_hamiltonian(&spec, &grid, &a).unwrap();
        assert_eq!(up.value, 1.0);
        assert_eq!(isaacs_gap(&spec, &grid, &a).unwrap(), 2.0);
    }

    #[test]
    fn single_point_grids_collapse() {
        let spec = bilinear();
        let grid = ControlGrid::scalar(&[0.7], &[-0.4]).unwrap();
        let a = args1(1.0, 1.0);
        let h = hamiltonian(&spec, &a, &[0.7], &[-0.4]).unwrap();
        assert_eq!(lower_hamiltonian(&spec, &grid, &a).unwrap().value, h);
        assert_eq!(upper_hamiltonian(&spec, &grid, &a).unwrap().value, h);
    }

    #[test]
    fn cancellation_has_no_gap() {
        let spec = GameSpec::new(1, 1, 1.0).unwrap().with_drift(|_, _, u, v, b| b[0] = u[0] + v[0]);
        let grid = ControlGrid::scalar(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]).unwrap();
        let lo = lower_hamiltonian(&spec, &grid, &args1(5.0, 0.0)).unwrap();
        assert_eq!(lo.value, 0.0);
        assert_eq!(isaacs_gap(&spec, &grid, &args1(5.0, 0.0)).unwrap(), 0.0);
        assert_eq!(isaacs_gap(&spec, &grid, &args1(-2.5, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn control_free_game_has_no_gap() {
        let spec = GameSpec::new(1, 1, 1.0)
            .unwrap()
            .with_drift(|_, x, _, _, b| b[0] = x[0].sin())
            .with_driver(|_, x, y, _, _, _| x[0] - y);
        let grid = ControlGrid::scalar(&[-1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!(isaacs_gap(&spec, &grid, &args1(1.3, -0.2)).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_coefficient_is_reported() {
        let spec = GameSpec::new(1, 1, 1.0).unwrap().with_driver(|_, _, _, _, _, _| f64::NAN);
        let err = hamiltonian(&spec, &args1(0.0, 0.0), &[0.0], &[0.0]).unwrap_err();
        assert!(matches!(err, LabError::Coefficient { coefficient: "driver", .. }));
    }

    #[test]
    fn asymmetric_hessian_rejected() {
        assert!(HamiltonianArgs::new(0.0, vec![0.0, 0.0], 0.0, vec![0.0, 0.0], vec![1.0, 0.5, 0.4, 1.0]).is_err());
    }

    #[test]
    fn duplicate_controls_rejected() {
        assert!(ControlGrid::scalar(&[1.0, 1.0], &[0.0]).is_err());
        assert!(ControlGrid::scalar(&[], &[0.0]).is_err());
    }

    #[test]
    fn local_driver_examples() {
        let spec = GameSpec::new(1, 1, 1.0)
            .unwrap()
            .with_drift(|_, x, _, _, b| b[0] = 2.0 * x[0])
            .with_diffusion(|_, _, _, _, s| s[0] = 0.3);
        let zero = Polynomial::zero(1);
        assert_eq!(local_driver_f(&spec, &zero, 0.1, &[0.5], 1.0, &[0.0], &[0.0], &[0.0]).unwrap(), 0.0);
        let phi_t = Polynomial::zero(1).term(1.0, 1, &[0]).unwrap();
        assert_eq!(local_driver_f(&spec, &phi_t, 0.1, &[0.5], 1.0, &[0.0], &[0.0], &[0.0]).unwrap(), 1.0);

        let heat = GameSpec::new(1, 1, 1.0).unwrap().with_diffusion(|_, _, _, _, s| s[0] = 1.0);
        let x2 = Polynomial::zero(1).term(1.0, 0, &[2]).unwrap();
        let val = local_driver_f(&heat, &x2, 0.4, &[0.9], 3.0, &[2.0], &[0.0], &[0.0]).unwrap();
        assert!((val - 1.0).abs() < 1e-15);
    }

    #[test]
    fn local_driver_with_zero_phi_is_driver() {
        let spec = GameSpec::new(1, 1, 1.0)
            .unwrap()
            .with_drift(|_, _, u, _, b| b[0] = u[0])
            .with_driver(|_, x, y, z, u, v| x[0] * y + z[0] * u[0] - v[0]);
        let zero = Polynomial::zero(1);
        for &(u, v) in &[(-1.0, 2.0), (0.5, 0.5), (3.0, -1.0)] {
            let lhs = local_driver_f(&spec, &zero, 0.2, &[0.7], 1.5, &[0.3], &[u], &[v]).unwrap();
            let rhs = spec.driver_at(0.2, &[0.7], 1.5, &[0.3], &[u], &[v]).unwrap();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn f0_f1_bilinear() {
        let spec = bilinear();
        let grid = ControlGrid::scalar(&[-1.0, 1.0], &[-1.0, 1.0]).unwrap();
        let zero = Polynomial::zero(1);
        let r = f0(&spec, &grid, &zero, 0.0, &[0.0], 0.0, &[0.0]).unwrap();
        assert_eq!(r.value, -1.0);
        let (v1, j) = f1(&spec, &grid, &zero, 0.0, &[0.0], 0.0, &[0.0], &[1.0]).unwrap();
        assert_eq!((v1, j), (-1.0, 0));
        let single = ControlGrid::scalar(&[0.5], &[0.5]).unwrap();
        let f = local_driver_f(&spec, &zero, 0.0, &[0.0], 0.0, &[0.0], &[0.5], &[0.5]).unwrap();
        assert_eq!(f0(&spec, &single, &zero, 0.0, &[0.0], 0.0, &[0.0]).unwrap().value, f);
        assert_eq!(f1(&spec, &single, &zero, 0.0, &[0.0], 0.0, &[0.0], &[0.5]).unwrap().0, f);
    }

    #[test]
    fn polynomial_derivatives() {
        // φ = 2 t x0 x1 + x0³ - t² + 4
        let p = Polynomial::zero(2)
            .term(2.0, 1, &[1, 1])
            .unwrap()
            .term(1.0, 0, &[3, 0])
            .unwrap()
            .term(-1.0, 2, &[0, 0])
            .unwrap()
            .term(4.0, 0, &[0, 0])
            .unwrap();
        let (t, x) = (0.5, [1.5, -2.0]);
        assert!((p.value(t, &x) - (2.0 * 0.5 * 1.5 * -2.0 + 3.375 - 0.25 + 4.0)).abs() < 1e-14);
        assert!((p.time_derivative(t, &x) - (2.0 * 1.5 * -2.0 - 1.0)).abs() < 1e-14);
        let mut g = [0.0; 2];
        p.gradient(t, &x, &mut g);
        assert!((g[0] - (2.0 * 0.5 * -2.0 + 3.0 * 2.25)).abs() < 1e-14);
        assert!((g[1] - (2.0 * 0.5 * 1.5)).abs() < 1e-14);
        let mut h = [0.0; 4];
        p.hessian(t, &x, &mut h);
        assert_eq!(h, [9.0, 1.0, 1.0, 0.0]);
        assert!(Polynomial::zero(1).term(1.0, 2, &[2]).is_err());
    }

    #[test]
    fn assumption_spot_check() {
        let spec = GameSpec::new(1, 1, 1.0)
            .unwrap()
            .with_drift(|_, x, u, _, b| b[0] = 0.5 * x[0].sin() + u[0])
            .with_diffusion(|_, x, _, _, s| s[0] = 1.0 + 0.25 * x[0].cos())
            .with_terminal(|x| x[0].abs())
            .with_lipschitz(1.0);
        let grid = ControlGrid::scalar(&[-0.5, 0.5], &[0.0]).unwrap();
        let r = check_assumptions(&spec, &grid, 3.0, 500, 7).unwrap();
        assert!(r.lipschitz_ok && r.growth_ok, "{r:?}");
        let bad = spec.with_lipschitz(0.1);
        let r = check_assumptions(&bad, &grid, 3.0, 500, 7).unwrap();
        assert!(!r.lipschitz_ok);
    }
}

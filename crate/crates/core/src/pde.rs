//! Explicit monotone finite differences for the lower and upper Isaacs
//! equations, stepping backward from `V_N = Φ`:
//!
//! ```text
//! V_k = V_{k+1} + Δt · H^∓(t_k, x, V_{k+1}, D_h V_{k+1}, D²_h V_{k+1})
//! ```
//!
//! The gradient uses central differences. Mixed second derivatives use the
//! directional (Kushner) stencil along whichever diagonal matches the sign of
//! `a_ij = ½(σσᵀ)_ij`, which keeps every neighbour weight non-negative as
//! long as the diagonal of `a` dominates. Both conditions are checked for
//! every node and control pair before a slice is accepted.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dpp::{value_iteration, StateGrid, Tag, ValueField};
use crate::error::{LabError, Result};
use crate::model::{
    hamiltonian_with, lower_hamiltonian, upper_hamiltonian, ControlGrid, GameSpec, HamiltonianArgs, Monomial,
    Polynomial, Scratch, TestFunction,
};
use crate::sde_sim::TimeGrid;
use crate::FORMAT_HEADER;

const WEIGHT_FLOOR: f64 = -1e-12;

/// Neighbour values of one node: `axis[i] = (V(x−h_i e_i), V(x+h_i e_i))`,
/// `diag[(i, j)] = (V(x+e_i+e_j), V(x−e_i−e_j), V(x+e_i−e_j), V(x−e_i+e_j))`.
struct Neighbourhood {
    center: f64,
    axis: Vec<(f64, f64)>,
    diag: Vec<[f64; 4]>,
    outside: usize,
}

fn neighbour(sgrid: &StateGrid, values: &[f64], node: usize, offset: &[isize], outside: &mut usize) -> f64 {
    let (idx, clamped) = sgrid.shifted(node, offset);
    if !clamped {
        return values[idx];
    }
    *outside += 1;
    let x: Vec<f64> =
        sgrid.coords(node).iter().enumerate().map(|(i, xi)| xi + offset[i] as f64 * sgrid.h(i)).collect();
    sgrid.interpolate(values, &x)
}

fn neighbourhood(sgrid: &StateGrid, values: &[f64], node: usize) -> Neighbourhood {
    let n = sgrid.dim();
    let mut outside = 0;
    let mut off = vec![0isize; n];
    let mut axis = Vec::with_capacity(n);
    for i in 0..n {
        off[i] = -1;
        let lo = neighbour(sgrid, values, node, &off, &mut outside);
        off[i] = 1;
        let hi = neighbour(sgrid, values, node, &off, &mut outside);
        off[i] = 0;
        axis.push((lo, hi));
    }
    let mut diag = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if j <= i {
                diag.push([0.0; 4]);
                continue;
            }
            let mut at = |si: isize, sj: isize| {
                off[i] = si;
                off[j] = sj;
                let v = neighbour(sgrid, values, node, &off, &mut outside);
                off[i] = 0;
                off[j] = 0;
                v
            };
            diag.push([at(1, 1), at(-1, -1), at(1, -1), at(-1, 1)]);
        }
    }
    Neighbourhood { center: values[node], axis, diag, outside }
}

/// Checks the neighbour and centre weights for one control pair.
fn check_weights(sigma: &[f64], b: &[f64], h: &[f64], l: f64, dt: f64, n: usize, d: usize, x: &[f64]) -> Result<()> {
    let a = |i: usize, j: usize| 0.5 * (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let mut diag = a(i, i) / (h[i] * h[i]);
        for j in 0..n {
            if j != i {
                diag -= a(i, j).abs() / (h[i] * h[j]);
            }
        }
        if diag < WEIGHT_FLOOR {
            return Err(LabError::StencilNotMonotone(format!(
                "axis {i} weight {diag:.3e} < 0 at x = {x:?}; the off-diagonal part of σσᵀ dominates"
            )));
        }
        let row: f64 = (0..d).map(|k| sigma[i * d + k].powi(2)).sum::<f64>().sqrt();
        let first = (b[i].abs() + l * row) / (2.0 * h[i]);
        if diag - first < WEIGHT_FLOOR {
            return Err(LabError::Cfl(format!(
                "neighbour weight {:.3e} < 0 along axis {i} at x = {x:?}; refine h",
                diag - first
            )));
        }
        total += 2.0 * a(i, i) / (h[i] * h[i]);
        for j in (i + 1)..n {
            total -= 2.0 * a(i, j).abs() / (h[i] * h[j]);
        }
    }
    let center = 1.0 - dt * (total + l);
    if center < WEIGHT_FLOOR {
        return Err(LabError::Cfl(format!("centre weight {center:.3e} < 0 at x = {x:?} with Δt = {dt}")));
    }
    Ok(())
}

/// Discrete gradient and the sign-adapted discrete Hessian for one pair.
fn discrete_derivatives(nb: &Neighbourhood, sigma: &[f64], h: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let p: Vec<f64> = (0..n).map(|i| (nb.axis[i].1 - nb.axis[i].0) / (2.0 * h[i])).collect();
    let mut hess = vec![0.0; n * n];
    for i in 0..n {
        hess[i * n + i] = (nb.axis[i].1 - 2.0 * nb.center + nb.axis[i].0) / (h[i] * h[i]);
        for j in (i + 1)..n {
            let aij: f64 = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
            let ring = nb.axis[i].0 + nb.axis[i].1 + nb.axis[j].0 + nb.axis[j].1;
            let [pp, mm, pm, mp] = nb.diag[i * n + j];
            let cross = if aij >= 0.0 {
                (2.0 * nb.center + pp + mm - ring) / (2.0 * h[i] * h[j])
            } else {
                -(2.0 * nb.center + pm + mp - ring) / (2.0 * h[i] * h[j])
            };
            hess[i * n + j] = cross;
            hess[j * n + i] = cross;
        }
    }
    (p, hess)
}

/// Solves the lower (`H⁻`) or upper (`H⁺`) Isaacs equation on the grid.
pub fn solve_isaacs(
    spec: &GameSpec,
    controls: &ControlGrid,
    sgrid: &StateGrid,
    tgrid: &TimeGrid,
    tag: Tag,
) -> Result<ValueField> {
    if sgrid.dim() != spec.dim_state {
        return Err(LabError::invalid("state grid dimension does not match the game"));
    }
    if (tgrid.t1 - spec.horizon).abs() > 1e-12 {
        return Err(LabError::invalid("the time grid must end at the horizon"));
    }
    let (n, d, nu, nv) = (spec.dim_state, spec.dim_noise, controls.nu(), controls.nv());
    let h: Vec<f64> = (0..n).map(|i| sgrid.h(i)).collect();
    let dt = tgrid.dt();
    let l = spec.yz_lipschitz();
    let steps = tgrid.steps;
    let mut values = vec![Vec::new(); steps + 1];
    values[steps] = (0..sgrid.len()).map(|i| spec.terminal_at(&sgrid.coords(i))).collect::<Result<_>>()?;
    let mut boundary_hits = 0;
    for k in (0..steps).rev() {
        let t = tgrid.t(k);
        let next = &values[k + 1];
        let rows: Vec<Result<(f64, usize)>> = (0..sgrid.len())
            .into_par_iter()
            .map(|node| {
                let x = sgrid.coords(node);
                let nb = neighbourhood(sgrid, next, node);
                let mut sc = Scratch::new(n, d);
                let mut table = vec![0.0; nu * nv];
                for i in 0..nu {
                    for j in 0..nv {
                        let (u, v) = (controls.u(i), controls.v(j));
                        spec.drift_at(t, &x, u, v, &mut sc.b)?;
                        spec.diffusion_at(t, &x, u, v, &mut sc.sigma)?;
                        check_weights(&sc.sigma, &sc.b, &h, l, dt, n, d, &x)?;
                        let (p, hessian) = discrete_derivatives(&nb, &sc.sigma, &h, n, d);
                        let args = HamiltonianArgs { t, x: x.clone(), y: nb.center, p, hessian };
                        table[i * nv + j] = hamiltonian_with(spec, &args, u, v, &mut sc)?;
                    }
                }
                let ham = match tag {
                    Tag::Lower => (0..nu)
                        .map(|i| table[i * nv..(i + 1) * nv].iter().copied().fold(f64::INFINITY, f64::min))
                        .fold(f64::NEG_INFINITY, f64::max),
                    Tag::Upper => (0..nv)
                        .map(|j| (0..nu).map(|i| table[i * nv + j]).fold(f64::NEG_INFINITY, f64::max))
                        .fold(f64::INFINITY, f64::min),
                };
                let value = nb.center + dt * ham;
                if !value.is_finite() {
                    return Err(LabError::NonFinite { step: k, node });
                }
                Ok((value, nb.outside))
            })
            .collect();
        let mut slice = Vec::with_capacity(rows.len());
        for r in rows {
            let (v, o) = r?;
            slice.push(v);
            boundary_hits += o;
        }
        values[k] = slice;
    }
    Ok(ValueField { tag, tgrid: *tgrid, sgrid: sgrid.clone(), values, policy: None, boundary_hits })
}

/// A named test function for the residual probe.
#[derive(Clone)]
pub struct Probe {
    pub name: String,
    pub phi: Arc<dyn TestFunction>,
}

/// Built-in polynomials followed by seeded random quadratics, `count` in total.
pub fn probe_family(dim: usize, horizon: f64, count: usize, seed: u64) -> Result<Vec<Probe>> {
    let zero = vec![0u32; dim];
    let unit = |i: usize, p: u32| {
        let mut e = zero.clone();
        e[i] = p;
        e
    };
    let mut out: Vec<Probe> = Vec::new();
    let mut push = |name: String, p: Polynomial| out.push(Probe { name, phi: Arc::new(p) });
    push("zero".into(), Polynomial::zero(dim));
    push("t".into(), Polynomial::zero(dim).term(1.0, 1, &zero)?);
    for i in 0..dim {
        push(format!("x{i}"), Polynomial::zero(dim).term(1.0, 0, &unit(i, 1))?);
        push(format!("x{i}^2"), Polynomial::zero(dim).term(1.0, 0, &unit(i, 2))?);
        push(format!("-x{i}^2"), Polynomial::zero(dim).term(-1.0, 0, &unit(i, 2))?);
        push(format!("x{i}^3/6"), Polynomial::zero(dim).term(1.0 / 6.0, 0, &unit(i, 3))?);
    }
    let mut sq = Polynomial::zero(dim).term(horizon, 0, &zero)?.term(-1.0, 1, &zero)?;
    for i in 0..dim {
        sq = sq.term(1.0, 0, &unit(i, 2))?;
    }
    push("|x|^2+(T-t)".into(), sq);
    push("-4(T-t)".into(), Polynomial::zero(dim).term(-4.0 * horizon, 0, &zero)?.term(4.0, 1, &zero)?);
    push("4(T-t)".into(), Polynomial::zero(dim).term(4.0 * horizon, 0, &zero)?.term(-4.0, 1, &zero)?);
    out.truncate(count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = 0;
    while out.len() < count {
        let mut terms = vec![
            Monomial { coef: rng.random_range(-1.0..1.0), t_pow: 0, x_pows: zero.clone() },
            Monomial { coef: rng.random_range(-5.0..5.0), t_pow: 1, x_pows: zero.clone() },
            Monomial { coef: rng.random_range(-2.0..2.0), t_pow: 2, x_pows: zero.clone() },
        ];
        for i in 0..dim {
            terms.push(Monomial { coef: rng.random_range(-1.0..1.0), t_pow: 0, x_pows: unit(i, 1) });
            for j in i..dim {
                let mut e = unit(i, 1);
                e[j] += 1;
                let scale = if i == j { 3.0 } else { 0.5 };
                terms.push(Monomial { coef: rng.random_range(-scale..scale), t_pow: 0, x_pows: e });
            }
        }
        out.push(Probe { name: format!("quad{r}"), phi: Arc::new(Polynomial::new(dim, terms)?) });
        r += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub c_probe: f64,
    /// Touching points closer than this to the boundary are skipped.
    pub margin: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { c_probe: 10.0, margin: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Violation,
    Skipped,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Violation => "violation",
            Verdict::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub phi: String,
    /// `"sub"` at the maximum of `W − φ`, `"super"` at the minimum.
    pub side: &'static str,
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub residual: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub tolerance: f64,
    pub rows: Vec<ProbeRow>,
    pub violations: usize,
    pub skipped: usize,
}

impl ProbeReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{FORMAT_HEADER}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["phi", "side", "step", "t", "x", "residual", "verdict"])?;
        for r in &self.rows {
            let x = r.x.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
            w.write_record([
                r.phi.clone(),
                r.side.to_string(),
                r.step.to_string(),
                r.t.to_string(),
                x,
                r.residual.to_string(),
                r.verdict.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Locates the extrema of `W − φ` over all slices and evaluates the
/// sub/supersolution inequalities there with `φ`'s exact derivatives and
/// `y = W` at the touching point. Extrema on the final slice or within the
/// margin of the spatial boundary are skipped.
pub fn viscosity_residual_probe(
    field: &ValueField,
    spec: &GameSpec,
    controls: &ControlGrid,
    family: &[Probe],
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let g = &field.sgrid;
    let n = g.dim();
    let h_max = (0..n).map(|i| g.h(i)).fold(0.0, f64::max);
    let tolerance = opts.c_probe * (h_max + field.tgrid.dt());
    let inside = g.interior(opts.margin.max(h_max));
    let coords: Vec<Vec<f64>> = (0..g.len()).map(|i| g.coords(i)).collect();
    let steps = field.tgrid.steps;
    let rows: Vec<Result<[ProbeRow; 2]>> = family
        .par_iter()
        .map(|probe| {
            let mut hi = (f64::NEG_INFINITY, 0, 0);
            let mut lo = (f64::INFINITY, 0, 0);
            for k in 0..=steps {
                let t = field.tgrid.t(k);
                for (node, x) in coords.iter().enumerate() {
                    let gap = field.values[k][node] - probe.phi.value(t, x);
                    if gap > hi.0 {
                        hi = (gap, k, node);
                    }
                    if gap < lo.0 {
                        lo = (gap, k, node);
                    }
                }
            }
            let eval = |(_, k, node): (f64, usize, usize), side: &'static str| -> Result<ProbeRow> {
                let t = field.tgrid.t(k);
                let x = coords[node].clone();
                if k == steps || !inside[node] {
                    return Ok(ProbeRow { phi: probe.name.clone(), side, step: k, t, x, residual: f64::NAN, verdict: Verdict::Skipped });
                }
                let mut p = vec![0.0; n];
                let mut hess = vec![0.0; n * n];
                probe.phi.gradient(t, &x, &mut p);
                probe.phi.hessian(t, &x, &mut hess);
                let args = HamiltonianArgs::new(t, x.clone(), field.values[k][node], p, hess)?;
                let ham = match field.tag {
                    Tag::Lower => lower_hamiltonian(spec, controls, &args)?.value,
                    Tag::Upper => upper_hamiltonian(spec, controls, &args)?.value,
                };
                let residual = probe.phi.time_derivative(t, &x) + ham;
                let bad = if side == "sub" { residual < -tolerance } else { residual > tolerance };
                let verdict = if bad { Verdict::Violation } else { Verdict::Pass };
                Ok(ProbeRow { phi: probe.name.clone(), side, step: k, t, x, residual, verdict })
            };
            Ok([eval(hi, "sub")?, eval(lo, "super")?])
        })
        .collect();
    let mut out = Vec::with_capacity(2 * family.len());
    for r in rows {
        out.extend(r?);
    }
    let violations = out.iter().filter(|r| r.verdict == Verdict::Violation).count();
    let skipped = out.iter().filter(|r| r.verdict == Verdict::Skipped).count();
    Ok(ProbeReport { tolerance, rows: out, violations, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub tag: Tag,
    /// `(h, Δt, max interior |W_dpp − W_pde|)` at base and refined resolution.
    pub base: (f64, f64, f64),
    pub refined: (f64, f64, f64),
    pub tolerance: f64,
    pub passed: bool,
}

/// Roundoff floor below which discrepancies count as equal.
pub const AGREEMENT_FLOOR: f64 = 1e-12;

/// Max interior discrepancy between the value-iteration and PDE fields, at
/// the given resolution and at `(h/2, Δt/4)`. Passes when the base
/// discrepancy is within `tolerance` and refinement does not increase it.
pub fn cross_method_agreement(
    spec: &GameSpec,
    controls: &ControlGrid,
    sgrid: &StateGrid,
    tgrid: &TimeGrid,
    tag: Tag,
    margin: f64,
    tolerance: f64,
) -> Result<AgreementReport> {
    let at = |sg: &StateGrid, tg: &TimeGrid| -> Result<(f64, f64, f64)> {
        let a = value_iteration(spec, controls, sg, tg, tag)?;
        let b = solve_isaacs(spec, controls, sg, tg, tag)?;
        let inside = sg.interior(margin);
        let worst = (0..sg.len())
            .filter(|&i| inside[i])
            .map(|i| (a.values[0][i] - b.values[0][i]).abs())
            .fold(0.0, f64::max);
        Ok((sg.h(0), tg.dt(), worst))
    };
    let base = at(sgrid, tgrid)?;
    let fine_axes = sgrid
        .axes()
        .iter()
        .map(|a| crate::dpp::Axis::new(a.min, a.max, 2 * (a.nodes - 1) + 1))
        .collect::<Result<Vec<_>>>()?;
    let fine = StateGrid::new(fine_axes, sgrid.policy())?;
    let fine_t = TimeGrid::new(tgrid.t0, tgrid.t1, 4 * tgrid.steps)?;
    let refined = at(&fine, &fine_t)?;
    let passed = base.2 <= tolerance && refined.2 <= base.2.max(AGREEMENT_FLOOR);
    Ok(AgreementReport { tag, base, refined, tolerance, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpp::{Axis, BoundaryPolicy};

    fn heat(terminal: fn(&[f64]) -> f64) -> GameSpec {
        GameSpec::new(1, 1, 1.0)
            .unwrap()
            .with_diffusion(|_, _, _, _, s| s[0] = 1.0)
            .with_terminal(terminal)
            .with_lipschitz(1.0)
            .with_driver_lipschitz(0.0)
    }

    fn heat_grids(h: f64) -> (StateGrid, TimeGrid) {
        let s = StateGrid::new(vec![Axis::with_spacing(-6.0, 6.0, h).unwrap()], BoundaryPolicy::Clamp).unwrap();
        let steps = (1.0 / (h * h)).round() as usize;
        (s, TimeGrid::new(0.0, 1.0, steps).unwrap())
    }

    #[test]
    fn linear_data_is_invariant() {
        let spec = heat(|x| x[0]);
        let (s, t) = heat_grids(0.1);
        let s = s.with_policy(BoundaryPolicy::LinearExtrapolate);
        let f = solve_isaacs(&spec, &ControlGrid::single(), &s, &t, Tag::Lower).unwrap();
        let inside = s.interior(3.0);
        for i in (0..s.len()).filter(|&i| inside[i]) {
            assert!((f.values[0][i] - s.coords(i)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn heat_second_moment() {
        let spec = heat(|x| x[0] * x[0]);
        let (s, t) = heat_grids(0.05);
        let f = solve_isaacs(&spec, &ControlGrid::single(), &s, &t, Tag::Lower).unwrap();
        assert!((f.at(0, &[0.0]) - 1.0).abs() <= 0.02);
    }

    #[test]
    fn cfl_violation_is_reported() {
        let spec = heat(|x| x[0]);
        let s = StateGrid::uniform(1, -1.0, 1.0, 41).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let err = solve_isaacs(&spec, &ControlGrid::single(), &s, &t, Tag::Lower).unwrap_err();
        assert!(err.to_string().contains("monotonicity (CFL) violated"), "{err}");
    }

    #[test]
    fn dominated_diagonal_is_rejected() {
        // σ = [[1, 0], [1.2, 0.1]]: a_12 = 0.6 exceeds a_11 = 0.5 on a square grid
        let spec = GameSpec::new(2, 2, 1.0).unwrap().with_diffusion(|_, _, _, _, s| {
            s.copy_from_slice(&[1.0, 0.0, 1.2, 0.1]);
        });
        let s = StateGrid::uniform(2, -1.0, 1.0, 11).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 400).unwrap();
        let err = solve_isaacs(&spec, &ControlGrid::single(), &s, &t, Tag::Lower).unwrap_err();
        assert!(err.to_string().contains("stencil not monotone"), "{err}");
    }

    #[test]
    fn cross_derivative_of_product() {
        // correlated noise, Φ = x·y: the exact solution is x·y + ρ(T − t)
        let rho = 0.3;
        let spec = GameSpec::new(2, 2, 1.0)
            .unwrap()
            .with_diffusion(move |_, _, _, _, s| {
                s.copy_from_slice(&[1.0, 0.0, rho, (1.0f64 - rho * rho).sqrt()]);
            })
            .with_terminal(|x| x[0] * x[1])
            .with_driver_lipschitz(0.0);
        let s = StateGrid::uniform(2, -2.0, 2.0, 21).unwrap().with_policy(BoundaryPolicy::LinearExtrapolate);
        let t = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let f = solve_isaacs(&spec, &ControlGrid::single(), &s, &t, Tag::Lower).unwrap();
        assert!((f.at(0, &[0.0, 0.0]) - rho).abs() < 1e-10, "{}", f.at(0, &[0.0, 0.0]));
    }

    #[test]
    fn family_has_requested_size() {
        let fam = probe_family(1, 1.0, 50, 3).unwrap();
        assert_eq!(fam.len(), 50);
        assert_eq!(fam[0].name, "zero");
        assert!(fam.iter().any(|p| p.name == "|x|^2+(T-t)"));
    }

    #[test]
    fn exact_solution_has_zero_residual() {
        let spec = heat(|x| x[0] * x[0]);
        let (s, t) = heat_grids(0.1);
        let f = solve_isaacs(&spec, &ControlGrid::single(), &s, &t, Tag::Lower).unwrap();
        let fam: Vec<Probe> = probe_family(1, 1.0, 14, 0).unwrap();
        let r = viscosity_residual_probe(&f, &spec, &ControlGrid::single(), &fam, &ProbeOptions::default()).unwrap();
        assert_eq!(r.violations, 0, "{:?}", r.rows);
    }
}

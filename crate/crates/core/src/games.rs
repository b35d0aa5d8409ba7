//! Built-in game families with default grids and, where available, closed
//! forms for the lower and upper values.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::dpp::{Axis, BoundaryPolicy, StateGrid};
use crate::error::{LabError, Result};
use crate::model::{ControlGrid, GameSpec};
use crate::sde_sim::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDoc {
    pub name: &'static str,
    pub default: f64,
    pub doc: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: &'static [ParamDoc],
}

const HORIZON: ParamDoc = ParamDoc { name: "horizon", default: 1.0, doc: "terminal time T" };

static FAMILIES: [FamilyInfo; 5] = [
    FamilyInfo {
        name: "bilinear",
        summary: "f = coef·u·v, U = V = {-1, 1}, b = 0, σ = 1, Φ = 0; lower −coef(T−t), upper +coef(T−t) (no value)",
        params: &[HORIZON, ParamDoc { name: "coef", default: 4.0, doc: "driver coefficient" }],
    },
    FamilyInfo {
        name: "cancellation",
        summary: "b = u + v, U = V = {-1, 0, 1}, σ constant, f = 0, Φ(x) = x; Isaacs holds, W = U = x",
        params: &[HORIZON, ParamDoc { name: "sigma", default: 0.5, doc: "diffusion coefficient" }],
    },
    FamilyInfo {
        name: "constants",
        summary: "Φ = k, f = 0, b = (u + v)/2, σ = 1, U = V = {-1, 1}; W = U = k",
        params: &[HORIZON, ParamDoc { name: "k", default: 1.0, doc: "terminal constant" }],
    },
    FamilyInfo {
        name: "heat",
        summary: "single-point controls, b = 0, σ constant, f = 0, Φ(x) = x²; W = U = x² + σ²(T−t)",
        params: &[HORIZON, ParamDoc { name: "sigma", default: 1.0, doc: "diffusion coefficient" }],
    },
    FamilyInfo {
        name: "sine",
        summary: "b = sin x + gain·(u + v), σ = 1 + x²/(2(1+x²)), f = 0, Φ = cos x, U = V = {-1, 1}",
        params: &[HORIZON, ParamDoc { name: "gain", default: 0.0, doc: "control gain in the drift" }],
    },
];

/// Alphabetized listing of the built-in families.
pub fn families() -> &'static [FamilyInfo] {
    &FAMILIES
}

pub fn family(name: &str) -> Option<&'static FamilyInfo> {
    FAMILIES.iter().find(|f| f.name == name)
}

/// Default grids; `Δt = horizon / steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDefaults {
    pub min: f64,
    pub max: f64,
    pub h: f64,
    pub steps: usize,
    pub policy: BoundaryPolicy,
}

impl GridDefaults {
    pub fn state_grid(&self, dim: usize) -> Result<StateGrid> {
        let axis = Axis::with_spacing(self.min, self.max, self.h)?;
        StateGrid::new(vec![axis; dim], self.policy)
    }

    pub fn time_grid(&self, horizon: f64) -> Result<TimeGrid> {
        TimeGrid::new(0.0, horizon, self.steps)
    }
}

pub type ValueFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct Benchmark {
    pub family: &'static str,
    pub spec: GameSpec,
    pub controls: ControlGrid,
    pub grid: GridDefaults,
    /// Distance from the spatial boundary below which comparisons are
    /// polluted by the boundary policy.
    pub margin: f64,
    pub exact_lower: Option<ValueFn>,
    pub exact_upper: Option<ValueFn>,
}

fn resolve(info: &FamilyInfo, given: &BTreeMap<String, f64>) -> Result<BTreeMap<&'static str, f64>> {
    for key in given.keys() {
        if !info.params.iter().any(|p| p.name == key) {
            return Err(LabError::invalid(format!("family `{}` has no parameter `{key}`", info.name)));
        }
    }
    let out: BTreeMap<&'static str, f64> =
        info.params.iter().map(|p| (p.name, given.get(p.name).copied().unwrap_or(p.default))).collect();
    if let Some(&v) = out.values().find(|v| !v.is_finite()) {
        return Err(LabError::invalid(format!("non-finite parameter value {v}")));
    }
    Ok(out)
}

/// Builds a family with the given parameter overrides.
pub fn build(name: &str, params: &BTreeMap<String, f64>) -> Result<Benchmark> {
    let info = family(name).ok_or_else(|| {
        let names: Vec<&str> = FAMILIES.iter().map(|f| f.name).collect();
        LabError::invalid(format!("unknown game family `{name}` (known: {})", names.join(", ")))
    })?;
    let p = resolve(info, params)?;
    let horizon = p["horizon"];
    let base = GameSpec::new(1, 1, horizon)?.named(name);
    let b = match name {
        "bilinear" => {
            let c = p["coef"];
            let spec = base
                .with_diffusion(|_, _, _, _, s| s[0] = 1.0)
                .with_driver(move |_, _, _, _, u, v| c * u[0] * v[0])
                .with_lipschitz(c.abs().max(1.0))
                .with_driver_lipschitz(0.0);
            Benchmark {
                family: info.name,
                spec,
                controls: ControlGrid::scalar(&[-1.0, 1.0], &[-1.0, 1.0])?,
                grid: GridDefaults { min: -6.0, max: 6.0, h: 0.05, steps: steps_for(horizon, 0.0025), policy: BoundaryPolicy::Clamp },
                margin: 3.0 * horizon.sqrt(),
                exact_lower: Some(Arc::new(move |t, _| -c.abs() * (horizon - t))),
                exact_upper: Some(Arc::new(move |t, _| c.abs() * (horizon - t))),
            }
        }
        "cancellation" => {
            let s = p["sigma"];
            let spec = base
                .with_drift(|_, _, u, v, b| b[0] = u[0] + v[0])
                .with_diffusion(move |_, _, _, _, out| out[0] = s)
                .with_terminal(|x| x[0])
                .with_lipschitz(1.0)
                .with_driver_lipschitz(0.0);
            let h = 0.05;
            // keeps σ√Δt = h so lattice moves land on grid nodes
            let dt = (h / s).powi(2);
            Benchmark {
                family: info.name,
                spec,
                controls: ControlGrid::scalar(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0])?,
                grid: GridDefaults { min: -5.0, max: 5.0, h, steps: steps_for(horizon, dt), policy: BoundaryPolicy::Clamp },
                // clamped-boundary error decays like a Gaussian tail; at 3σ√T it is still ~3e-4
                margin: 6.0 * s * horizon.sqrt(),
                exact_lower: Some(Arc::new(|_, x| x[0])),
                exact_upper: Some(Arc::new(|_, x| x[0])),
            }
        }
        "constants" => {
            let k = p["k"];
            let spec = base
                .with_drift(|_, _, u, v, b| b[0] = 0.5 * (u[0] + v[0]))
                .with_diffusion(|_, _, _, _, s| s[0] = 1.0)
                .with_terminal(move |_| k)
                .with_lipschitz(1.0)
                .with_driver_lipschitz(0.0);
            Benchmark {
                family: info.name,
                spec,
                controls: ControlGrid::scalar(&[-1.0, 1.0], &[-1.0, 1.0])?,
                grid: GridDefaults { min: -3.0, max: 3.0, h: 0.1, steps: steps_for(horizon, 0.01), policy: BoundaryPolicy::Clamp },
                margin: 0.0,
                exact_lower: Some(Arc::new(move |_, _| k)),
                exact_upper: Some(Arc::new(move |_, _| k)),
            }
        }
        "heat" => {
            let s = p["sigma"];
            let spec = base
                .with_diffusion(move |_, _, _, _, out| out[0] = s)
                .with_terminal(|x| x[0] * x[0])
                .with_lipschitz(s.abs().max(1.0))
                .with_driver_lipschitz(0.0);
            let h = 0.05;
            let exact: ValueFn = Arc::new(move |t, x| x[0] * x[0] + s * s * (horizon - t));
            Benchmark {
                family: info.name,
                spec,
                controls: ControlGrid::single(),
                grid: GridDefaults { min: -6.0, max: 6.0, h, steps: steps_for(horizon, (h / s).powi(2)), policy: BoundaryPolicy::Clamp },
                // Φ grows quadratically, so clamping pollutes further in: ~8e-3 at 3σ√T, ~1e-6 at 5σ√T
                margin: 5.0 * s * horizon.sqrt(),
                exact_lower: Some(exact.clone()),
                exact_upper: Some(exact),
            }
        }
        "sine" => {
            let g = p["gain"];
            let spec = base
                .with_drift(move |_, x, u, v, b| b[0] = x[0].sin() + g * (u[0] + v[0]))
                .with_diffusion(|_, x, _, _, s| s[0] = 1.0 + 0.5 * x[0] * x[0] / (1.0 + x[0] * x[0]))
                .with_terminal(|x| x[0].cos())
                .with_lipschitz(1.0 + 2.0 * g.abs())
                .with_driver_lipschitz(0.0);
            Benchmark {
                family: info.name,
                spec,
                controls: ControlGrid::scalar(&[-1.0, 1.0], &[-1.0, 1.0])?,
                grid: GridDefaults { min: -6.0, max: 6.0, h: 0.1, steps: steps_for(horizon, 0.004), policy: BoundaryPolicy::Clamp },
                margin: 4.5 * horizon.sqrt(),
                exact_lower: None,
                exact_upper: None,
            }
        }
        _ => unreachable!("family table and builder disagree"),
    };
    Ok(b)
}

fn steps_for(horizon: f64, dt: f64) -> usize {
    ((horizon / dt).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_is_sorted_and_complete() {
        let names: Vec<&str> = families().iter().map(|f| f.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        for n in ["bilinear", "cancellation", "heat"] {
            assert!(names.contains(&n));
        }
        for f in families() {
            assert!(build(f.name, &BTreeMap::new()).is_ok(), "{}", f.name);
        }
    }

    #[test]
    fn unknown_names_are_rejected() {
        assert!(build("nope", &BTreeMap::new()).is_err());
        let mut p = BTreeMap::new();
        p.insert("colour".to_string(), 1.0);
        assert!(build("heat", &p).is_err());
    }

    #[test]
    fn heat_defaults_match_base_resolution() {
        let b = build("heat", &BTreeMap::new()).unwrap();
        assert_eq!(b.grid.steps, 400);
        assert_eq!(b.grid.state_grid(1).unwrap().len(), 241);
        assert_eq!((b.exact_lower.unwrap())(0.0, &[0.0]), 1.0);
    }
}

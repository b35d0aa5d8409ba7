//! The check groups behind each subcommand. Every group appends summary rows
//! and writes its own CSVs; an error inside a group becomes a failed row
//! carrying the error text.

use std::io::Write;
use std::path::{Path, PathBuf};

use isaacs_core::bsde::{solve_backward, BsdeOptions, TerminalData};
use isaacs_core::certify::{
    localization_identity, rate_check_52, rate_check_54, solve_y0_ode, supinf_reduction_check, write_cert_csv, CertRow,
    LocalizationInstance, SupInfOptions,
};
use isaacs_core::dpp::{
    expectation_formulation_check, value_iteration, BoundaryPolicy, BruteForceOptions, StateGrid, Tag, TinyGame,
    ValueField,
};
use isaacs_core::error::{LabError, Result};
use isaacs_core::games::{build, Benchmark};
use isaacs_core::model::ControlGrid;
use isaacs_core::pde::{cross_method_agreement, probe_family, solve_isaacs};
use isaacs_core::sde_sim::{moment_check, simulate, Constant, Feedback, NoiseModel, TimeGrid};
use isaacs_core::FORMAT_HEADER;

use crate::config::{Boundary, ExperimentConfig, Format, Group};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub id: String,
    pub passed: bool,
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckRow {
    /// Passes when `metric ≤ tolerance`.
    fn at_most(id: impl Into<String>, metric: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        CheckRow { id: id.into(), passed: metric <= tolerance, metric, tolerance, detail: detail.into() }
    }

    fn error(group: Group, e: &LabError) -> Self {
        CheckRow { id: format!("{}.error", group.as_str()), passed: false, metric: f64::NAN, tolerance: f64::NAN, detail: e.to_string() }
    }
}

/// A resolved experiment: the family, its grids after overrides and the
/// output directory.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub bench: Benchmark,
    pub controls: ControlGrid,
    pub sgrid: StateGrid,
    pub tgrid: TimeGrid,
    pub margin: f64,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        let bench = build(&cfg.game.family, &cfg.game.params)?;
        let g = &cfg.grids;
        let mut d = bench.grid;
        d.min = g.x_min.unwrap_or(d.min);
        d.max = g.x_max.unwrap_or(d.max);
        d.h = g.h.unwrap_or(d.h);
        d.steps = g.steps.unwrap_or(d.steps);
        d.policy = match g.boundary {
            Some(Boundary::Clamp) => BoundaryPolicy::Clamp,
            Some(Boundary::Linear) => BoundaryPolicy::LinearExtrapolate,
            None => d.policy,
        };
        let controls = match (&g.u, &g.v) {
            (None, None) => bench.controls.clone(),
            (u, v) => {
                let first = |pts: &[Vec<f64>]| pts.iter().map(|p| p[0]).collect::<Vec<_>>();
                let u = u.clone().unwrap_or_else(|| first(&bench.controls.u_points));
                let v = v.clone().unwrap_or_else(|| first(&bench.controls.v_points));
                ControlGrid::scalar(&u, &v)?
            }
        };
        let sgrid = d.state_grid(bench.spec.dim_state)?;
        let tgrid = d.time_grid(bench.spec.horizon)?;
        let margin = cfg.run.margin.unwrap_or(bench.margin);
        Ok(Context { cfg, bench, controls, sgrid, tgrid, margin, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn wants(&self, f: Format) -> bool {
        self.cfg.output.formats.contains(&f)
    }
}

pub fn run_group(ctx: &Context, group: Group) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    let outcome = match group {
        Group::Value => fields(ctx, "value", value_iteration, &mut rows),
        Group::Pde => fields(ctx, "pde", solve_isaacs, &mut rows),
        Group::Agree => agree(ctx, &mut rows),
        Group::Certify => certify(ctx, &mut rows),
        Group::Oracle => oracle(ctx, &mut rows),
    };
    if let Err(e) = outcome {
        rows.push(CheckRow::error(group, &e));
    }
    rows
}

type Solver = fn(&isaacs_core::model::GameSpec, &ControlGrid, &StateGrid, &TimeGrid, Tag) -> Result<ValueField>;

fn fields(ctx: &Context, prefix: &str, solve: Solver, rows: &mut Vec<CheckRow>) -> Result<()> {
    let b = &ctx.bench;
    let (lower, upper) = rayon::join(
        || solve(&b.spec, &ctx.controls, &ctx.sgrid, &ctx.tgrid, Tag::Lower),
        || solve(&b.spec, &ctx.controls, &ctx.sgrid, &ctx.tgrid, Tag::Upper),
    );
    let (lower, upper) = (lower?, upper?);
    for f in [&lower, &upper] {
        let stem = format!("{prefix}_{}", f.tag.as_str());
        if ctx.wants(Format::Csv) {
            f.write_csv(&ctx.path(&format!("{stem}.csv")))?;
        }
        if ctx.wants(Format::Bin) {
            f.write_binary(&ctx.path(&format!("{stem}.bin")))?;
        }
    }
    let excess = lower
        .values
        .iter()
        .flatten()
        .zip(upper.values.iter().flatten())
        .map(|(w, u)| w - u)
        .fold(f64::NEG_INFINITY, f64::max);
    rows.push(CheckRow::at_most(
        format!("{prefix}.order"),
        excess,
        ctx.cfg.run.order_tol,
        format!("max (lower − upper) over all nodes; U − W at the grid centre is {:e}", centre_gap(ctx, &lower, &upper)),
    ));

    let inside = ctx.sgrid.interior(ctx.margin);
    let exact = [(&lower, &b.exact_lower), (&upper, &b.exact_upper)];
    for (field, closed) in exact {
        let Some(closed) = closed else { continue };
        let err = (0..ctx.sgrid.len())
            .filter(|&i| inside[i])
            .map(|i| (field.values[0][i] - closed(0.0, &ctx.sgrid.coords(i))).abs())
            .fold(0.0, f64::max);
        rows.push(CheckRow::at_most(
            format!("{prefix}.exact_{}", field.tag.as_str()),
            err,
            ctx.cfg.run.exact_tol,
            format!("max interior |V(0,x) − closed form|, margin {}", ctx.margin),
        ));
    }
    Ok(())
}

fn centre_gap(ctx: &Context, lower: &ValueField, upper: &ValueField) -> f64 {
    let c: Vec<f64> = ctx.sgrid.axes().iter().map(|a| 0.5 * (a.min + a.max)).collect();
    upper.at(0, &c) - lower.at(0, &c)
}

fn agree(ctx: &Context, rows: &mut Vec<CheckRow>) -> Result<()> {
    let b = &ctx.bench;
    let tol = ctx.cfg.run.agree_tol;
    let (lo, up) = rayon::join(
        || cross_method_agreement(&b.spec, &ctx.controls, &ctx.sgrid, &ctx.tgrid, Tag::Lower, ctx.margin, tol),
        || cross_method_agreement(&b.spec, &ctx.controls, &ctx.sgrid, &ctx.tgrid, Tag::Upper, ctx.margin, tol),
    );
    let reports = [lo?, up?];
    let mut file = std::fs::File::create(ctx.path("agree.csv"))?;
    writeln!(file, "{FORMAT_HEADER}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["tag", "level", "h", "dt", "discrepancy"]).map_err(LabError::from)?;
    for r in &reports {
        for (level, (h, dt, disc)) in [("base", r.base), ("refined", r.refined)] {
            w.write_record([r.tag.as_str(), level, &h.to_string(), &dt.to_string(), &disc.to_string()])
                .map_err(LabError::from)?;
        }
    }
    w.flush()?;
    for r in &reports {
        rows.push(CheckRow {
            id: format!("agree.{}", r.tag.as_str()),
            passed: r.passed,
            metric: r.base.2,
            tolerance: tol,
            detail: format!("base {:e}, refined {:e}; must not grow", r.base.2, r.refined.2),
        });
    }
    Ok(())
}

fn certify(ctx: &Context, rows: &mut Vec<CheckRow>) -> Result<()> {
    let run = &ctx.cfg.run;
    let b = &ctx.bench;
    let x = vec![run.cert_x; b.spec.dim_state];
    let probes = probe_family(b.spec.dim_state, b.spec.horizon, run.probes, run.seed)?;
    let pairs: Vec<(usize, usize)> =
        (0..ctx.controls.nu()).flat_map(|i| (0..ctx.controls.nv()).map(move |j| (i, j))).collect();
    let opts = SupInfOptions { budget: run.enumeration_budget, adapted: false };

    let mut cert = Vec::new();
    let (mut identity, mut ode, mut y3) = (0.0f64, 0.0f64, 0.0f64);
    let mut supinf_ratio = 0.0f64;
    let mut slopes: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut vacuous = [0usize; 2];
    for p in &probes {
        let mut inst = LocalizationInstance::new(
            b.spec.clone(),
            p.phi.clone(),
            run.cert_t,
            x.clone(),
            run.cert_delta,
            ctx.controls.clone(),
            run.window_steps,
        )?;
        inst.node_budget = run.node_budget;
        let row = |lemma: &str, lhs: f64, bound: f64, slope: f64, passed: bool| CertRow {
            lemma: lemma.into(),
            instance: p.name.clone(),
            delta: run.cert_delta,
            lhs,
            bound,
            slope,
            passed,
        };

        let mut worst: f64 = 0.0;
        for &(i, j) in &pairs {
            worst = worst.max(localization_identity(&inst, &Constant(i), &Constant(j))?.difference);
        }
        identity = identity.max(worst);
        cert.push(row("identity", worst, run.identity_tol, f64::NAN, worst <= run.identity_tol));

        let o = solve_y0_ode(&inst)?;
        let drift = (o.value - o.halved_value).abs();
        ode = ode.max(drift);
        cert.push(row("ode", drift, run.ode_tol, f64::NAN, drift <= run.ode_tol));

        let s = supinf_reduction_check(&inst, &opts)?;
        let allowed = run.supinf_rel_tol * (1.0 + s.y0.abs()) + s.truncation_bound;
        supinf_ratio = supinf_ratio.max(s.difference / allowed);
        y3 = y3.max(s.y3_gap);
        cert.push(row("supinf", s.difference, allowed, f64::NAN, s.difference <= allowed && s.y3_gap <= run.identity_tol));

        for (slot, (lemma, rate)) in [("rate52", rate_check_52(&inst, &run.rate_deltas)?), ("rate54", rate_check_54(&inst, &run.rate_deltas)?)]
            .into_iter()
            .enumerate()
        {
            if rate.vacuous {
                vacuous[slot] += 1;
            } else {
                slopes[slot].push(rate.slope);
            }
            for (d, v) in rate.deltas.iter().zip(&rate.values) {
                cert.push(CertRow { delta: *d, ..row(lemma, *v, run.rate_min_slope, rate.slope, !rate.vacuous && rate.slope >= run.rate_min_slope) });
            }
        }
    }
    write_cert_csv(&cert, &ctx.path("certify.csv"))?;

    let n = probes.len();
    rows.push(CheckRow::at_most("certify.identity", identity, run.identity_tol, format!("max |Y¹ − (G[φ] − φ)| over {n} test functions and all constant pairs")));
    rows.push(CheckRow::at_most("certify.ode", ode, run.ode_tol, "max |Y⁰ − Y⁰ on the halved mesh|"));
    rows.push(CheckRow::at_most("certify.supinf", supinf_ratio, 1.0, format!("max difference / allowed; max |Y³ − min_v Y²| = {y3:e}")));
    if y3 > run.identity_tol {
        rows.push(CheckRow::at_most("certify.supinf_y3", y3, run.identity_tol, "max |Y³ − min_v Y²|"));
    }
    for (k, name) in ["certify.rate52", "certify.rate54"].iter().enumerate() {
        let s = &slopes[k];
        // a vacuous fit means the difference vanished at every δ, which
        // satisfies any rate bound
        let (passed, metric, detail) = if s.is_empty() {
            (true, f64::NAN, format!("difference below 1e-14 at every δ for all {n} test functions"))
        } else {
            let min = s.iter().copied().fold(f64::INFINITY, f64::min);
            (
                min >= run.rate_min_slope,
                min,
                format!("min log-log slope over {} test functions ({} vanish identically); must be ≥ tolerance", s.len(), vacuous[k]),
            )
        };
        rows.push(CheckRow { id: name.to_string(), passed, metric, tolerance: run.rate_min_slope, detail });
    }
    Ok(())
}

fn oracle(ctx: &Context, rows: &mut Vec<CheckRow>) -> Result<()> {
    let run = &ctx.cfg.run;
    let spec = &ctx.bench.spec;
    let x0 = vec![run.x0; spec.dim_state];
    let grid = TimeGrid::new(0.0, spec.horizon, run.oracle_steps)?;
    let mut file = std::fs::File::create(ctx.path("oracle.csv"))?;
    writeln!(file, "{FORMAT_HEADER}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["oracle", "quantity", "value"]).map_err(LabError::from)?;
    let mut record = |o: &str, q: &str, v: f64| w.write_record([o, q, &v.to_string()]).map_err(LabError::from);

    let game = TinyGame { spec, controls: &ctx.controls, grid, x0: x0.clone() };
    let bf = BruteForceOptions { budget: run.enumeration_budget, ..Default::default() };
    let e = expectation_formulation_check(&game, &bf)?;
    record("expectation", "brute_lower", e.brute_lower)?;
    record("expectation", "expectation_lower", e.expectation_lower)?;
    rows.push(CheckRow::at_most("oracle.expectation", e.difference, run.order_tol, "|lower value by J − lower value by E[J]|"));

    // ξ + 1 ≥ ξ along a state-feedback lattice must order the solutions
    let u = Feedback(|_: usize, x: &[f64]| usize::from(x[0] > 0.0) % ctx.controls.nu());
    let v = Feedback(|k: usize, _: &[f64]| k % ctx.controls.nv());
    let bundle = simulate(spec, &ctx.controls, &grid, &NoiseModel::Binomial { node_budget: run.node_budget }, &x0, &u, &v)?;
    let xi = TerminalData::terminal_payoff(spec, &bundle)?;
    let up = TerminalData(xi.0.iter().map(|y| y + 1.0).collect());
    let opts = BsdeOptions::default();
    let lo = solve_backward(spec, &ctx.controls, &bundle, &xi, isaacs_core::bsde::Driver::Game, &opts)?;
    let hi = solve_backward(spec, &ctx.controls, &bundle, &up, isaacs_core::bsde::Driver::Game, &opts)?;
    let shortfall = lo.y.iter().flatten().zip(hi.y.iter().flatten()).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max);
    record("comparison", "root_gap", hi.y[0][0] - lo.y[0][0])?;
    rows.push(CheckRow::at_most("oracle.comparison", shortfall, run.order_tol, "max (y[ξ] − y[ξ+1]) over lattice nodes"));

    let mgrid = TimeGrid::new(0.0, run.moment_horizon.min(spec.horizon), run.moment_steps)?;
    let bundle = simulate(spec, &ctx.controls, &mgrid, &NoiseModel::gaussian(run.paths, run.seed), &x0, &Constant(0), &Constant(0))?;
    let m = moment_check(&bundle, &x0, 2)?;
    let slope = m.fitted_exponent.unwrap_or(f64::NAN);
    for (d, v) in m.deltas.iter().zip(&m.increment_moments) {
        record("moment", &format!("sup_increment_delta={d}"), *v)?;
    }
    record("moment", "slope", slope)?;
    w.flush()?;
    rows.push(CheckRow {
        id: "oracle.moment".into(),
        passed: slope >= run.moment_slope_min,
        metric: slope,
        tolerance: run.moment_slope_min,
        detail: "log-log slope of E sup|X − x0|² against δ; must be ≥ tolerance".into(),
    });
    Ok(())
}

pub fn write_summary(rows: &[CheckRow], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{FORMAT_HEADER}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["check", "verdict", "metric", "tolerance", "detail"])?;
    for r in rows {
        w.write_record([
            r.id.as_str(),
            if r.passed { "pass" } else { "fail" },
            &r.metric.to_string(),
            &r.tolerance.to_string(),
            &r.detail,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.id.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:<4}  {:>12}  {:>12}  detail\n", "check", "", "metric", "tolerance");
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:<4}  {:>12.4e}  {:>12.4e}  {}\n",
            r.id,
            if r.passed { "PASS" } else { "FAIL" },
            r.metric,
            r.tolerance,
            r.detail
        ));
    }
    let passed = rows.iter().filter(|r| r.passed).count();
    s.push_str(&format!("{passed} of {} checks passed\n", rows.len()));
    s
}

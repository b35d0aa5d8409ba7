//! Experiment manifests: TOML with four flat sections.
//!
//! ```toml
//! [game]
//! family = "bilinear"
//! coef = 4.0            # any family parameter, see `isaacs-lab list-games`
//!
//! [grids]               # every key optional; the family supplies defaults
//! x_min = -6.0
//! x_max = 6.0
//! h = 0.05
//! steps = 400
//! boundary = "clamp"    # or "linear"
//! u = [-1.0, 1.0]
//! v = [-1.0, 1.0]
//!
//! [run]
//! checks = ["value", "pde", "agree", "certify", "oracle"]
//! seed = 7
//!
//! [output]
//! dir = "out"
//! formats = ["csv", "bin"]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),

    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },

    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub game: GameSection,
    #[serde(default)]
    pub grids: GridSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GameSection {
    pub family: String,
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub h: Option<f64>,
    pub steps: Option<usize>,
    pub boundary: Option<Boundary>,
    pub u: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Clamp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Value,
    Pde,
    Agree,
    Certify,
    Oracle,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Value, Group::Pde, Group::Agree, Group::Certify, Group::Oracle];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Value => "value",
            Group::Pde => "pde",
            Group::Agree => "agree",
            Group::Certify => "certify",
            Group::Oracle => "oracle",
        }
    }
}

/// Which checks run, with what randomness, budgets and tolerances.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Groups run by the `all` subcommand.
    pub checks: Vec<Group>,
    /// Seeds the probe family and the Gaussian moment check.
    pub seed: u64,
    /// Lattice node cap for BSDE and certification windows.
    pub node_budget: usize,
    /// Cap on enumerated strategy or process candidates.
    pub enumeration_budget: u128,

    /// Max interior error against a closed form, when the family has one.
    pub exact_tol: f64,
    /// Slack allowed in lower ≤ upper.
    pub order_tol: f64,
    /// Largest admissible base-resolution |W_dpp − W_pde|.
    pub agree_tol: f64,
    /// Interior margin; defaults to the family's.
    pub margin: Option<f64>,

    /// Localization window start `(t, x)`, length and lattice steps.
    pub cert_t: f64,
    pub cert_x: f64,
    pub cert_delta: f64,
    pub window_steps: usize,
    /// Test functions for the certification window: the built-in
    /// polynomials, then seeded random quadratics.
    pub probes: usize,
    pub identity_tol: f64,
    /// Max |ODE value − value on the halved mesh|.
    pub ode_tol: f64,
    /// Relative part of the sup-inf tolerance; the truncation bound is added.
    pub supinf_rel_tol: f64,
    /// Minimum log-log slope of the localization rate checks.
    pub rate_min_slope: f64,
    pub rate_deltas: Vec<f64>,

    /// Start point and lattice depth of the oracle games.
    pub x0: f64,
    pub oracle_steps: usize,
    /// Gaussian paths for the moment check.
    pub paths: usize,
    /// Horizon and steps of the Gaussian moment check.
    pub moment_horizon: f64,
    pub moment_steps: usize,
    /// Least admissible log-log slope of `E sup|X − x0|²` against δ; drift
    /// only steepens it.
    pub moment_slope_min: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            checks: Group::ALL.to_vec(),
            seed: 0,
            node_budget: isaacs_core::sde_sim::DEFAULT_NODE_BUDGET,
            enumeration_budget: isaacs_core::dpp::DEFAULT_ENUMERATION_BUDGET,
            exact_tol: 1e-6,
            order_tol: 1e-12,
            agree_tol: 5e-2,
            margin: None,
            cert_t: 0.0,
            cert_x: 0.5,
            cert_delta: 0.2,
            window_steps: 4,
            probes: 12,
            identity_tol: 1e-10,
            ode_tol: 1e-9,
            supinf_rel_tol: 1e-8,
            rate_min_slope: 1.4,
            rate_deltas: isaacs_core::certify::DELTA_LADDER.to_vec(),
            x0: 0.0,
            oracle_steps: 2,
            paths: 20_000,
            moment_horizon: 0.1,
            moment_steps: 40,
            moment_slope_min: 0.7,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("isaacs-out"), formats: vec![Format::Csv] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Bin,
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn parse(text: &str, path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Parse { path: path.to_path_buf(), line, column, message: e.message().trim().to_string() }
    })?;
    cfg.validate().map_err(|message| ConfigError::Invalid { path: path.to_path_buf(), message })?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => ConfigError::NotFound(path.to_path_buf()),
        _ => ConfigError::Read { path: path.to_path_buf(), source },
    })?;
    parse(&text, path)
}

impl ExperimentConfig {
    fn validate(&self) -> Result<(), String> {
        if isaacs_core::games::family(&self.game.family).is_none() {
            return Err(format!("unknown game family `{}`; see `isaacs-lab list-games`", self.game.family));
        }
        let r = &self.run;
        let tolerances = [
            ("exact_tol", r.exact_tol),
            ("order_tol", r.order_tol),
            ("agree_tol", r.agree_tol),
            ("identity_tol", r.identity_tol),
            ("ode_tol", r.ode_tol),
            ("supinf_rel_tol", r.supinf_rel_tol),
        ];
        if let Some((name, v)) = tolerances.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(format!("run.{name} must be positive, got {v}"));
        }
        if r.checks.is_empty() {
            return Err("run.checks is empty".into());
        }
        if r.window_steps == 0 || r.oracle_steps == 0 || r.probes == 0 || r.moment_steps < 2 || r.paths < 2 {
            return Err("run.window_steps, run.oracle_steps and run.probes must be positive, run.moment_steps and run.paths ≥ 2".into());
        }
        if !(r.moment_horizon > 0.0) {
            return Err("run.moment_horizon must be positive".into());
        }
        if r.rate_deltas.len() < 2 || r.rate_deltas.iter().any(|d| !(*d > 0.0)) {
            return Err("run.rate_deltas needs at least two positive window lengths".into());
        }
        if self.output.formats.is_empty() {
            return Err("output.formats is empty".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(text: &str) -> Result<ExperimentConfig, ConfigError> {
        parse(text, Path::new("t.toml"))
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = p("[game]\nfamily = \"heat\"\nsigma = 2\n").unwrap();
        assert_eq!(c.game.params["sigma"], 2.0);
        assert_eq!(c.run.checks, Group::ALL.to_vec());
        assert_eq!(c.run.agree_tol, 5e-2);
        assert_eq!(c.output.formats, vec![Format::Csv]);
    }

    #[test]
    fn syntax_errors_carry_position() {
        match p("[game]\nfamily = \"heat\"\n[run]\nseed = = 3\n") {
            Err(ConfigError::Parse { line, column, .. }) => assert_eq!((line, column), (4, 8)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_families_are_rejected() {
        assert!(matches!(p("[game]\nfamily = \"heat\"\n[run]\nsede = 1\n"), Err(ConfigError::Parse { line: 4, .. })));
        assert!(matches!(p("[game]\nfamily = \"nope\"\n"), Err(ConfigError::Invalid { .. })));
        assert!(matches!(p("[game]\nfamily = \"heat\"\n[run]\nagree_tol = 0\n"), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn missing_file_is_reported_as_such() {
        let e = load(Path::new("/nonexistent/missing.cfg")).unwrap_err();
        assert!(e.to_string().starts_with("config not found"));
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}

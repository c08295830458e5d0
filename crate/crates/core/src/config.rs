//! Flat `section.key = value` run configuration.
//!
//! One key per line, `#` starts a comment, lists are whitespace separated.
//! Every key has a default so a config only states what differs; unknown keys
//! are rejected. [`RunConfig::to_text`] writes every key in a fixed order and
//! parses back to an equal value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::grid::{build_hierarchy, symmetric_window_cells, LevelSpec};
use crate::problems::{MovingGaussianProblem, Problem, SineDecayProblem, ZeroProblem};
use crate::td_solver::{LinearSolver, SolveCriteria};
use crate::vms::MarchConfig;

/// One offending key and what is wrong with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub key: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration: {}", join_diagnostics(.0))]
    ConfigInvalid(Vec<Diagnostic>),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl ConfigError {
    fn single(key: &str, message: impl Into<String>) -> Self {
        ConfigError::ConfigInvalid(vec![Diagnostic {
            key: key.into(),
            message: message.into(),
        }])
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            ConfigError::ConfigInvalid(d) => d,
            ConfigError::Io { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// Gaussian bump on an affine trajectory.
    Gaussian,
    Sine,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub dim: usize,
    pub nu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub start: Vec<f64>,
    pub velocity: Vec<f64>,
    pub length: f64,
    pub final_time: f64,
    /// Wave number of the sine problem.
    pub mode: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyConfig {
    /// N_ℓ per level, or only N₁ when `ratios` is given.
    pub cells: Vec<usize>,
    /// L_ℓ per level; the first entry is the domain length. With `ratios`
    /// the window lengths are targets, rounded up to an even number of
    /// parent cells.
    pub lengths: Vec<f64>,
    /// h_{ℓ−1}/h_ℓ for ℓ ≥ 2; empty when every N_ℓ is given.
    pub ratios: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub modes: Vec<usize>,
    pub steps: usize,
    pub theta_max: usize,
    pub rho_max: usize,
    pub td_tol: f64,
    pub scale_tol: f64,
    /// Steps per slab; 1 is plain marching.
    pub slab: usize,
    pub accelerated: bool,
    pub warm_start: bool,
    pub compression_tol: f64,
    pub linear: LinearSolver,
    pub load_points: usize,
    pub error_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    /// Also run the single-level reference at the finest mesh size.
    pub enabled: bool,
    pub modes: usize,
    /// Also run the dense oracle (small meshes only).
    pub oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Nt,
    Zeta,
    L2,
    Slab,
    Hierarchy,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Nt => "nt",
            SweepAxis::Zeta => "zeta",
            SweepAxis::L2 => "l2",
            SweepAxis::Slab => "m",
            SweepAxis::Hierarchy => "hierarchy",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "nt" => SweepAxis::Nt,
            "zeta" => SweepAxis::Zeta,
            "l2" => SweepAxis::L2,
            "m" => SweepAxis::Slab,
            "hierarchy" => SweepAxis::Hierarchy,
            _ => return None,
        })
    }
}

/// What a ζ sweep holds fixed for the windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZetaKeep {
    Length,
    Cells,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub axis: Option<SweepAxis>,
    pub values: Vec<f64>,
    pub keep: ZetaKeep,
    /// Index window `[first, last]` of the log-log slope fit.
    pub slope_window: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: String,
    pub csv: String,
    /// Steps at which fields are dumped.
    pub dump_steps: Vec<usize>,
    /// Coordinate of the z = const plane written for 3D dumps.
    pub slice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub problem: ProblemConfig,
    pub hierarchy: HierarchyConfig,
    pub solver: SolverConfig,
    pub reference: ReferenceConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    /// The 2D two-level baseline.
    fn default() -> Self {
        let p = MovingGaussianProblem::benchmark_2d();
        let c = SolveCriteria::default();
        Self {
            name: "run".into(),
            problem: ProblemConfig {
                kind: ProblemKind::Gaussian,
                dim: p.dim,
                nu: p.nu,
                sigma: p.sigma,
                lambda: p.lambda,
                start: p.start,
                velocity: p.velocity,
                length: p.length,
                final_time: p.final_time,
                mode: 1,
            },
            hierarchy: HierarchyConfig {
                cells: vec![64, 64],
                lengths: vec![1.0, 0.125],
                ratios: Vec::new(),
            },
            solver: SolverConfig {
                modes: vec![2, 2],
                steps: 128,
                theta_max: c.theta_max,
                rho_max: c.rho_max,
                td_tol: c.td_tol,
                scale_tol: c.scale_tol,
                slab: 1,
                accelerated: true,
                warm_start: true,
                compression_tol: 1e-10,
                linear: LinearSolver::Banded,
                load_points: 2,
                error_points: 3,
            },
            reference: ReferenceConfig {
                enabled: false,
                modes: 2,
                oracle: false,
            },
            sweep: SweepConfig {
                axis: None,
                values: Vec::new(),
                keep: ZetaKeep::Length,
                slope_window: None,
            },
            output: OutputConfig {
                dir: "out".into(),
                csv: "results.csv".into(),
                dump_steps: Vec::new(),
                slice: 0.5,
            },
        }
    }
}

const KEYS: &[&str] = &[
    "run.name",
    "problem.kind",
    "problem.dim",
    "problem.nu",
    "problem.sigma",
    "problem.lambda",
    "problem.start",
    "problem.velocity",
    "problem.length",
    "problem.final_time",
    "problem.mode",
    "hierarchy.cells",
    "hierarchy.lengths",
    "hierarchy.ratios",
    "solver.modes",
    "solver.steps",
    "solver.theta_max",
    "solver.rho_max",
    "solver.td_tol",
    "solver.scale_tol",
    "solver.slab",
    "solver.accelerated",
    "solver.warm_start",
    "solver.compression_tol",
    "solver.linear",
    "solver.load_points",
    "solver.error_points",
    "reference.enabled",
    "reference.modes",
    "reference.oracle",
    "sweep.axis",
    "sweep.values",
    "sweep.keep",
    "sweep.slope_window",
    "output.dir",
    "output.csv",
    "output.dump_steps",
    "output.slice",
];

struct Parser {
    diags: Vec<Diagnostic>,
}

impl Parser {
    fn fail(&mut self, key: &str, msg: impl Into<String>) {
        self.diags.push(Diagnostic {
            key: key.into(),
            message: msg.into(),
        });
    }

    fn scalar<T: std::str::FromStr>(&mut self, key: &str, v: &str, what: &str) -> Option<T> {
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.fail(key, format!("expected {what}, got `{v}`"));
                None
            }
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str, v: &str, what: &str) -> Option<Vec<T>> {
        let mut out = Vec::new();
        for tok in v.split_whitespace() {
            out.push(self.scalar(key, tok, what)?);
        }
        Some(out)
    }

    fn boolean(&mut self, key: &str, v: &str) -> Option<bool> {
        match v {
            "true" | "yes" | "1" => Some(true),
            "false" | "no" | "0" => Some(false),
            _ => {
                self.fail(key, format!("expected true or false, got `{v}`"));
                None
            }
        }
    }
}

fn fmt_list<T: fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        let mut p = Parser { diags: Vec::new() };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                p.fail(&format!("line {}", lineno + 1), "expected `key = value`");
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                p.fail(k, "unknown key");
            } else if entries.insert(k.to_string(), v.to_string()).is_some() {
                p.fail(k, "given more than once");
            }
        }
        let mut c = RunConfig::default();
        for (k, v) in &entries {
            c.set(&mut p, k, v);
        }
        if !p.diags.is_empty() {
            return Err(ConfigError::ConfigInvalid(p.diags));
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key from its text form, as in a config file.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::single(key, "unknown key"));
        }
        let mut p = Parser { diags: Vec::new() };
        self.set(&mut p, key, value);
        if p.diags.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::ConfigInvalid(p.diags))
        }
    }

    fn set(&mut self, p: &mut Parser, k: &str, v: &str) {
        macro_rules! put {
            ($field:expr, $val:expr) => {
                if let Some(x) = $val {
                    $field = x;
                }
            };
        }
        match k {
            "run.name" => self.name = v.to_string(),
            "problem.kind" => match v {
                "gaussian" => self.problem.kind = ProblemKind::Gaussian,
                "sine" => self.problem.kind = ProblemKind::Sine,
                "zero" => self.problem.kind = ProblemKind::Zero,
                _ => p.fail(k, format!("expected gaussian, sine or zero, got `{v}`")),
            },
            "problem.dim" => put!(self.problem.dim, p.scalar(k, v, "an integer")),
            "problem.nu" => put!(self.problem.nu, p.scalar(k, v, "a number")),
            "problem.sigma" => put!(self.problem.sigma, p.scalar(k, v, "a number")),
            "problem.lambda" => put!(self.problem.lambda, p.scalar(k, v, "a number")),
            "problem.start" => put!(self.problem.start, p.list(k, v, "numbers")),
            "problem.velocity" => put!(self.problem.velocity, p.list(k, v, "numbers")),
            "problem.length" => put!(self.problem.length, p.scalar(k, v, "a number")),
            "problem.final_time" => put!(self.problem.final_time, p.scalar(k, v, "a number")),
            "problem.mode" => put!(self.problem.mode, p.scalar(k, v, "an integer")),
            "hierarchy.cells" => put!(self.hierarchy.cells, p.list(k, v, "integers")),
            "hierarchy.lengths" => put!(self.hierarchy.lengths, p.list(k, v, "numbers")),
            "hierarchy.ratios" => put!(self.hierarchy.ratios, p.list(k, v, "integers")),
            "solver.modes" => put!(self.solver.modes, p.list(k, v, "integers")),
            "solver.steps" => put!(self.solver.steps, p.scalar(k, v, "an integer")),
            "solver.theta_max" => put!(self.solver.theta_max, p.scalar(k, v, "an integer")),
            "solver.rho_max" => put!(self.solver.rho_max, p.scalar(k, v, "an integer")),
            "solver.td_tol" => put!(self.solver.td_tol, p.scalar(k, v, "a number")),
            "solver.scale_tol" => put!(self.solver.scale_tol, p.scalar(k, v, "a number")),
            "solver.slab" => put!(self.solver.slab, p.scalar(k, v, "an integer")),
            "solver.accelerated" => put!(self.solver.accelerated, p.boolean(k, v)),
            "solver.warm_start" => put!(self.solver.warm_start, p.boolean(k, v)),
            "solver.compression_tol" => put!(self.solver.compression_tol, p.scalar(k, v, "a number")),
            "solver.linear" => match v {
                "banded" => self.solver.linear = LinearSolver::Banded,
                "dense" => self.solver.linear = LinearSolver::Dense,
                _ => p.fail(k, format!("expected banded or dense, got `{v}`")),
            },
            "solver.load_points" => put!(self.solver.load_points, p.scalar(k, v, "an integer")),
            "solver.error_points" => put!(self.solver.error_points, p.scalar(k, v, "an integer")),
            "reference.enabled" => put!(self.reference.enabled, p.boolean(k, v)),
            "reference.modes" => put!(self.reference.modes, p.scalar(k, v, "an integer")),
            "reference.oracle" => put!(self.reference.oracle, p.boolean(k, v)),
            "sweep.axis" => {
                if v.is_empty() || v == "none" {
                    self.sweep.axis = None;
                } else {
                    match SweepAxis::parse(v) {
                        Some(a) => self.sweep.axis = Some(a),
                        None => p.fail(k, format!("expected nt, zeta, l2, m or hierarchy, got `{v}`")),
                    }
                }
            }
            "sweep.values" => put!(self.sweep.values, p.list(k, v, "numbers")),
            "sweep.keep" => match v {
                "length" => self.sweep.keep = ZetaKeep::Length,
                "cells" => self.sweep.keep = ZetaKeep::Cells,
                _ => p.fail(k, format!("expected length or cells, got `{v}`")),
            },
            "sweep.slope_window" => {
                if v.is_empty() || v == "none" {
                    self.sweep.slope_window = None;
                } else if let Some(w) = p.list::<usize>(k, v, "two indices") {
                    if w.len() == 2 {
                        self.sweep.slope_window = Some((w[0], w[1]));
                    } else {
                        p.fail(k, "expected two indices");
                    }
                }
            }
            "output.dir" => self.output.dir = v.to_string(),
            "output.csv" => self.output.csv = v.to_string(),
            "output.dump_steps" => put!(self.output.dump_steps, p.list(k, v, "integers")),
            "output.slice" => put!(self.output.slice, p.scalar(k, v, "a number")),
            _ => p.fail(k, "unknown key"),
        }
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let pr = &self.problem;
        let h = &self.hierarchy;
        let s = &self.solver;
        let kind = match pr.kind {
            ProblemKind::Gaussian => "gaussian",
            ProblemKind::Sine => "sine",
            ProblemKind::Zero => "zero",
        };
        let linear = match s.linear {
            LinearSolver::Banded => "banded",
            LinearSolver::Dense => "dense",
        };
        let keep = match self.sweep.keep {
            ZetaKeep::Length => "length",
            ZetaKeep::Cells => "cells",
        };
        let values: Vec<(&str, String)> = vec![
            ("run.name", self.name.clone()),
            ("problem.kind", kind.into()),
            ("problem.dim", pr.dim.to_string()),
            ("problem.nu", format!("{:?}", pr.nu)),
            ("problem.sigma", format!("{:?}", pr.sigma)),
            ("problem.lambda", format!("{:?}", pr.lambda)),
            ("problem.start", fmt_list(&pr.start)),
            ("problem.velocity", fmt_list(&pr.velocity)),
            ("problem.length", format!("{:?}", pr.length)),
            ("problem.final_time", format!("{:?}", pr.final_time)),
            ("problem.mode", pr.mode.to_string()),
            ("hierarchy.cells", fmt_list(&h.cells)),
            ("hierarchy.lengths", fmt_list(&h.lengths)),
            ("hierarchy.ratios", fmt_list(&h.ratios)),
            ("solver.modes", fmt_list(&s.modes)),
            ("solver.steps", s.steps.to_string()),
            ("solver.theta_max", s.theta_max.to_string()),
            ("solver.rho_max", s.rho_max.to_string()),
            ("solver.td_tol", format!("{:?}", s.td_tol)),
            ("solver.scale_tol", format!("{:?}", s.scale_tol)),
            ("solver.slab", s.slab.to_string()),
            ("solver.accelerated", s.accelerated.to_string()),
            ("solver.warm_start", s.warm_start.to_string()),
            ("solver.compression_tol", format!("{:?}", s.compression_tol)),
            ("solver.linear", linear.into()),
            ("solver.load_points", s.load_points.to_string()),
            ("solver.error_points", s.error_points.to_string()),
            ("reference.enabled", self.reference.enabled.to_string()),
            ("reference.modes", self.reference.modes.to_string()),
            ("reference.oracle", self.reference.oracle.to_string()),
            ("sweep.axis", self.sweep.axis.map_or("none", |a| a.name()).into()),
            ("sweep.values", fmt_list(&self.sweep.values)),
            ("sweep.keep", keep.into()),
            (
                "sweep.slope_window",
                self.sweep
                    .slope_window
                    .map_or("none".into(), |(a, b)| format!("{a} {b}")),
            ),
            ("output.dir", self.output.dir.clone()),
            ("output.csv", self.output.csv.clone()),
            ("output.dump_steps", fmt_list(&self.output.dump_steps)),
            ("output.slice", format!("{:?}", self.output.slice)),
        ];
        let mut out = String::new();
        for (k, v) in values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Checks every precondition the solver would otherwise hit mid-run.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut d = Vec::new();
        let mut bad = |k: &str, m: String| {
            d.push(Diagnostic {
                key: k.into(),
                message: m,
            })
        };
        let pr = &self.problem;
        if !(1..=3).contains(&pr.dim) {
            bad("problem.dim", format!("must be 1, 2 or 3, got {}", pr.dim));
        }
        for (k, v) in [
            ("problem.nu", pr.nu),
            ("problem.length", pr.length),
            ("problem.final_time", pr.final_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad(k, format!("must be positive, got {v}"));
            }
        }
        if pr.kind == ProblemKind::Gaussian {
            if let Err(e) = self.gaussian().validate() {
                bad("problem", e);
            }
        }
        if pr.kind == ProblemKind::Sine && pr.mode == 0 {
            bad("problem.mode", "must be positive".into());
        }
        let h = &self.hierarchy;
        let levels = self.levels();
        if levels == 0 || levels > 3 {
            bad("hierarchy.lengths", format!("expected 1 to 3 levels, got {levels}"));
        }
        if h.ratios.is_empty() {
            if h.cells.len() != levels {
                bad("hierarchy.cells", format!("{} cell counts for {levels} levels", h.cells.len()));
            }
        } else {
            if h.cells.len() != 1 {
                bad("hierarchy.cells", "give only N1 when hierarchy.ratios is set".into());
            }
            if h.ratios.len() + 1 != levels {
                bad("hierarchy.ratios", format!("{} ratios for {levels} levels", h.ratios.len()));
            }
            if h.ratios.contains(&0) {
                bad("hierarchy.ratios", "ratios must be positive".into());
            }
        }
        if h.cells.contains(&0) {
            bad("hierarchy.cells", "cell counts must be positive".into());
        }
        if !h.lengths.is_empty() && (h.lengths[0] - pr.length).abs() > 1e-12 * pr.length {
            bad(
                "hierarchy.lengths",
                format!("first level must cover the domain of length {}", pr.length),
            );
        }
        let s = &self.solver;
        if s.modes.len() != levels {
            bad("solver.modes", format!("{} ranks for {levels} levels", s.modes.len()));
        }
        if s.modes.contains(&0) {
            bad("solver.modes", "ranks must be positive".into());
        }
        if s.steps == 0 {
            bad("solver.steps", "must be positive".into());
        }
        if s.theta_max == 0 {
            bad("solver.theta_max", "must be positive".into());
        }
        if s.rho_max == 0 {
            bad("solver.rho_max", "must be positive".into());
        }
        for (k, v) in [
            ("solver.td_tol", s.td_tol),
            ("solver.scale_tol", s.scale_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad(k, format!("must be positive, got {v}"));
            }
        }
        if !(s.compression_tol >= 0.0) {
            bad("solver.compression_tol", "must be non-negative".into());
        }
        if s.load_points == 0 || s.load_points > 5 {
            bad("solver.load_points", "must be 1 to 5".into());
        }
        if s.error_points == 0 || s.error_points > 5 {
            bad("solver.error_points", "must be 1 to 5".into());
        }
        if s.slab == 0 {
            bad("solver.slab", "must be positive".into());
        } else if s.slab > 1 {
            if s.steps % s.slab != 0 {
                bad("solver.slab", format!("{} does not divide {} steps", s.slab, s.steps));
            }
            if levels != 2 {
                bad("solver.slab", "slabs need exactly two levels".into());
            }
        }
        if self.reference.modes == 0 {
            bad("reference.modes", "must be positive".into());
        }
        if let Some(axis) = self.sweep.axis {
            if self.sweep.values.is_empty() {
                bad("sweep.values", format!("no values for the {} sweep", axis.name()));
            }
            let counts = !matches!(axis, SweepAxis::L2);
            if let Some(v) = self
                .sweep
                .values
                .iter()
                .find(|&&v| !(v > 0.0 && v.is_finite()) || (counts && v.fract() != 0.0))
            {
                let kind = if counts { "positive integers" } else { "positive" };
                bad("sweep.values", format!("{} values must be {kind}, got {v}", axis.name()));
            }
            if let Some((a, b)) = self.sweep.slope_window {
                if a >= b || b >= self.sweep.values.len() {
                    bad("sweep.slope_window", format!("needs first < last < {}", self.sweep.values.len()));
                }
            }
        }
        if !(self.output.slice >= 0.0 && self.output.slice <= pr.length) {
            bad("output.slice", "must lie in the domain".into());
        }
        if !d.is_empty() {
            return Err(ConfigError::ConfigInvalid(d));
        }
        let specs = self.level_specs()?;
        build_hierarchy(&specs, pr.dim)
            .map(|_| ())
            .map_err(|e| ConfigError::ConfigInvalid(vec![hierarchy_diag(&e.to_string())]))
    }

    pub fn levels(&self) -> usize {
        self.hierarchy.lengths.len()
    }

    /// Per-level `{N_ℓ, L_ℓ}`; in the ratio form each window is the
    /// symmetric whole-parent-cell window covering its target length.
    pub fn level_specs(&self) -> Result<Vec<LevelSpec>, ConfigError> {
        let h = &self.hierarchy;
        if h.ratios.is_empty() {
            return Ok(h
                .cells
                .iter()
                .zip(&h.lengths)
                .map(|(&cells, &length)| LevelSpec { cells, length })
                .collect());
        }
        let n1 = h.cells.first().copied().unwrap_or(0);
        let mut specs = vec![LevelSpec {
            cells: n1,
            length: h.lengths[0],
        }];
        let mut mesh = h.lengths[0] / n1 as f64;
        for (l, &ratio) in h.ratios.iter().enumerate() {
            let parent = specs[l];
            let pc = symmetric_window_cells(h.lengths[l + 1], mesh).min(parent.cells);
            specs.push(LevelSpec {
                cells: pc * ratio,
                length: pc as f64 * mesh,
            });
            mesh /= ratio as f64;
        }
        Ok(specs)
    }

    fn gaussian(&self) -> MovingGaussianProblem {
        let pr = &self.problem;
        MovingGaussianProblem {
            dim: pr.dim,
            nu: pr.nu,
            sigma: pr.sigma,
            lambda: pr.lambda,
            start: pr.start.clone(),
            velocity: pr.velocity.clone(),
            length: pr.length,
            final_time: pr.final_time,
        }
    }

    pub fn build_problem(&self) -> Box<dyn Problem> {
        let pr = &self.problem;
        match pr.kind {
            ProblemKind::Gaussian => Box::new(self.gaussian()),
            ProblemKind::Sine => Box::new(SineDecayProblem {
                dim: pr.dim,
                nu: pr.nu,
                mode: pr.mode,
                final_time: pr.final_time,
            }),
            ProblemKind::Zero => Box::new(ZeroProblem {
                dim: pr.dim,
                nu: pr.nu,
                final_time: pr.final_time,
                center: pr.start.clone(),
            }),
        }
    }

    pub fn march_config(&self) -> Result<MarchConfig, ConfigError> {
        let s = &self.solver;
        let mut m = MarchConfig::new(self.problem.dim, self.level_specs()?, s.modes.clone(), s.steps);
        m.criteria = SolveCriteria {
            td_tol: s.td_tol,
            scale_tol: s.scale_tol,
            rho_max: s.rho_max,
            theta_max: s.theta_max,
        };
        m.accelerated = s.accelerated;
        m.warm_start = s.warm_start;
        m.solver = s.linear;
        m.compression_tol = s.compression_tol;
        m.load_points = s.load_points;
        m.error_points = s.error_points;
        Ok(m)
    }

    /// Mesh size of the finest level.
    pub fn finest_mesh_size(&self) -> f64 {
        let h = &self.hierarchy;
        if h.ratios.is_empty() {
            h.lengths[h.lengths.len() - 1] / h.cells[h.cells.len() - 1] as f64
        } else {
            h.lengths[0] / (h.cells[0] * h.ratios.iter().product::<usize>()) as f64
        }
    }

    /// Cells per axis of a uniform mesh at the finest resolution.
    pub fn finest_lattice_cells(&self) -> usize {
        (self.problem.length / self.finest_mesh_size()).round() as usize
    }
}

fn hierarchy_diag(message: &str) -> Diagnostic {
    Diagnostic {
        key: "hierarchy.cells/hierarchy.lengths".into(),
        message: message.into(),
    }
}

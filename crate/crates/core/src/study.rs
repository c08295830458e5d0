//! Runs, parameter sweeps, method comparisons and field dumps driven by a
//! [`RunConfig`], with results written as versioned CSV.
//!
//! CSV columns (schema `v1`, first line is a `#` comment naming it):
//!
//! | column | meaning |
//! |---|---|
//! | `run_id` | `<name>-<point index>` |
//! | `name` | `run.name` |
//! | `axis`, `value` | sweep axis and its value (`none`, empty for single runs) |
//! | `method` | `vms`, `reference` or `oracle` |
//! | `dim`, `levels` | dimension and level count |
//! | `cells`, `lengths`, `modes` | per-level N, L and Q joined by `;` |
//! | `steps`, `dt`, `slab` | N_t, Δt and the slab size m |
//! | `error` | relative L² error averaged over steps |
//! | `slope` | least-squares log-log slope of `error` over the sweep window |
//! | `step_ms`, `slope_step_ms` | mean wall-clock ms per step after 2 warm-up steps, and its slope |
//! | `dofs`, `n_ref` | separated unknowns `(Σ N_ℓ Q_ℓ)·d` and the matched uniform resolution |
//! | `max_theta`, `unconverged` | largest inter-scale iteration count, steps not meeting a tolerance |
//! | `max_nodal_diff` | largest nodal difference to the dense oracle when it was run |
//! | `status` | `ok` or `failed: <reason>` |
//!
//! Timing columns are the only ones that differ between repeated runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, SweepAxis, ZetaKeep};
use crate::grid::IndexBox;
use crate::problems::Problem;
use crate::separated::{FieldError, SeparatedField};
use crate::verify::{dense_cn_oracle, dofs, oracle_limit, region_error, timing_stats, VerifyError};
use crate::vms::{march, slab_march_observed, LevelState, RunReport, VmsError};

pub const CSV_SCHEMA: &str = "# vmstd results v1";

pub const CSV_COLUMNS: &[&str] = &[
    "run_id",
    "name",
    "axis",
    "value",
    "method",
    "dim",
    "levels",
    "cells",
    "lengths",
    "modes",
    "steps",
    "dt",
    "slab",
    "error",
    "slope",
    "step_ms",
    "slope_step_ms",
    "dofs",
    "n_ref",
    "max_theta",
    "unconverged",
    "max_nodal_diff",
    "status",
];

/// Steps excluded from timing averages.
pub const TIMING_WARMUP: usize = 2;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run `{run}`: {source}")]
    Solver { run: String, source: VmsError },
    #[error("run `{run}`: {source}")]
    Oracle { run: String, source: VerifyError },
    #[error("field: {0}")]
    Field(#[from] FieldError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StudyError + '_ {
    move |source| StudyError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub name: String,
    pub axis: String,
    pub value: Option<f64>,
    pub method: String,
    pub dim: usize,
    pub cells: Vec<usize>,
    pub lengths: Vec<f64>,
    pub modes: Vec<usize>,
    pub steps: usize,
    pub dt: f64,
    pub slab: usize,
    pub error: f64,
    pub slope: Option<f64>,
    pub step_ms: f64,
    pub slope_step_ms: Option<f64>,
    pub dofs: usize,
    pub n_ref: usize,
    pub max_theta: usize,
    pub unconverged: usize,
    pub max_nodal_diff: Option<f64>,
    pub status: String,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn record(&self) -> Vec<String> {
        let join = |v: Vec<String>| v.join(";");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        vec![
            self.run_id.clone(),
            self.name.clone(),
            self.axis.clone(),
            self.value.map_or(String::new(), |v| format!("{v}")),
            self.method.clone(),
            self.dim.to_string(),
            self.cells.len().to_string(),
            join(self.cells.iter().map(|c| c.to_string()).collect()),
            join(self.lengths.iter().map(|c| format!("{c}")).collect()),
            join(self.modes.iter().map(|c| c.to_string()).collect()),
            self.steps.to_string(),
            format!("{:e}", self.dt),
            self.slab.to_string(),
            format!("{:e}", self.error),
            opt(self.slope),
            format!("{:.4}", self.step_ms),
            opt(self.slope_step_ms),
            self.dofs.to_string(),
            self.n_ref.to_string(),
            self.max_theta.to_string(),
            self.unconverged.to_string(),
            opt(self.max_nodal_diff),
            self.status.clone(),
        ]
    }
}

/// Writes rows under the schema comment line.
pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<(), StudyError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    writeln!(file, "{CSV_SCHEMA}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a results file back as string records keyed by [`CSV_COLUMNS`].
pub fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, StudyError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let body = text.strip_prefix(CSV_SCHEMA).unwrap_or(&text).trim_start_matches('\n');
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        out.push(rec?.iter().map(|s| s.to_string()).collect());
    }
    Ok(out)
}

/// Outcome of one solver run reduced to what the tables need.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub error: f64,
    pub step_ms: f64,
    pub max_theta: usize,
    pub unconverged: usize,
    pub converged: bool,
}

impl RunSummary {
    pub fn from_report(report: &RunReport) -> Self {
        Self {
            error: report.relative_error().unwrap_or(f64::NAN),
            step_ms: 1e3 * timing_stats(report, TIMING_WARMUP).mean_seconds,
            max_theta: report.steps.iter().map(|s| s.scale_iterations).max().unwrap_or(0),
            unconverged: report
                .steps
                .iter()
                .filter(|s| !s.scale_converged || s.td_unconverged > 0)
                .count(),
            converged: report.all_converged(),
        }
    }
}

fn solve(cfg: &RunConfig, observer: &mut dyn FnMut(&LevelState)) -> Result<RunReport, StudyError> {
    let problem = cfg.build_problem();
    let m = cfg.march_config()?;
    slab_march_observed(problem.as_ref(), &m, cfg.solver.slab, observer).map_err(|source| StudyError::Solver {
        run: cfg.name.clone(),
        source,
    })
}

/// Marches one configuration.
pub fn run_vms(cfg: &RunConfig) -> Result<RunReport, StudyError> {
    solve(cfg, &mut |_| {})
}

/// The single-level reference at the configuration's finest mesh size, with
/// the configuration's solver settings.
pub fn run_reference(cfg: &RunConfig) -> Result<RunReport, StudyError> {
    let problem = cfg.build_problem();
    let mut c = cfg.clone();
    c.hierarchy.cells = vec![cfg.finest_lattice_cells()];
    c.hierarchy.lengths = vec![cfg.problem.length];
    c.hierarchy.ratios.clear();
    c.solver.modes = vec![cfg.reference.modes];
    c.solver.slab = 1;
    let m = c.march_config()?;
    march(problem.as_ref(), &m).map_err(|source| StudyError::Solver {
        run: format!("{} reference", cfg.name),
        source,
    })
}

fn base_row(cfg: &RunConfig, index: usize, axis: Option<(SweepAxis, f64)>, method: &str) -> ResultRow {
    let specs = cfg.level_specs().unwrap_or_default();
    let (cells, lengths, modes) = match method {
        "vms" => (
            specs.iter().map(|s| s.cells).collect(),
            specs.iter().map(|s| s.length).collect(),
            cfg.solver.modes.clone(),
        ),
        "reference" => (
            vec![cfg.finest_lattice_cells()],
            vec![cfg.problem.length],
            vec![cfg.reference.modes],
        ),
        _ => (vec![cfg.finest_lattice_cells()], vec![cfg.problem.length], vec![]),
    };
    let d = cfg.problem.dim;
    ResultRow {
        run_id: format!("{}-{index}", cfg.name),
        name: cfg.name.clone(),
        axis: axis.map_or("none".into(), |(a, _)| a.name().into()),
        value: axis.map(|(_, v)| v),
        method: method.into(),
        dim: d,
        dofs: if modes.is_empty() {
            cells.iter().map(|n| (n + 1).pow(d as u32)).sum()
        } else {
            dofs(&cells, &modes, d)
        },
        n_ref: cfg.finest_lattice_cells(),
        cells,
        lengths,
        modes,
        steps: cfg.solver.steps,
        dt: cfg.problem.final_time / cfg.solver.steps as f64,
        slab: if method == "vms" { cfg.solver.slab } else { 1 },
        error: f64::NAN,
        slope: None,
        step_ms: f64::NAN,
        slope_step_ms: None,
        max_theta: 0,
        unconverged: 0,
        max_nodal_diff: None,
        status: "ok".into(),
    }
}

fn fill(row: &mut ResultRow, outcome: Result<RunSummary, StudyError>) {
    match outcome {
        Ok(s) => {
            row.error = s.error;
            row.step_ms = s.step_ms;
            row.max_theta = s.max_theta;
            row.unconverged = s.unconverged;
        }
        Err(e) => row.status = format!("failed: {e}"),
    }
}

/// Result rows of one configuration: the multi-level run, then the
/// reference when enabled.
pub fn run_rows(cfg: &RunConfig, index: usize, axis: Option<(SweepAxis, f64)>) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let mut row = base_row(cfg, index, axis, "vms");
    fill(&mut row, run_vms(cfg).map(|r| RunSummary::from_report(&r)));
    rows.push(row);
    if cfg.reference.enabled {
        let mut row = base_row(cfg, index, axis, "reference");
        fill(&mut row, run_reference(cfg).map(|r| RunSummary::from_report(&r)));
        rows.push(row);
    }
    rows
}

/// One configuration with errors propagated rather than flagged; states at
/// `output.dump_steps` are written to `dump_dir` during the same march.
pub fn run_single(cfg: &RunConfig, dump_dir: Option<&Path>) -> Result<Vec<ResultRow>, StudyError> {
    let mut row = base_row(cfg, 0, None, "vms");
    let report = match dump_dir {
        Some(dir) if !cfg.output.dump_steps.is_empty() => run_with_dumps(cfg, dir)?.0,
        _ => run_vms(cfg)?,
    };
    fill(&mut row, Ok(RunSummary::from_report(&report)));
    let mut rows = vec![row];
    if cfg.reference.enabled {
        let mut row = base_row(cfg, 0, None, "reference");
        fill(&mut row, Ok(RunSummary::from_report(&run_reference(cfg)?)));
        rows.push(row);
    }
    Ok(rows)
}

/// Copy of `cfg` with one sweep value applied.
pub fn apply_axis(cfg: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig, ConfigError> {
    let mut c = cfg.clone();
    let bad = |k: &str, m: String| {
        ConfigError::ConfigInvalid(vec![crate::config::Diagnostic {
            key: k.into(),
            message: m,
        }])
    };
    let as_count = |v: f64, k: &str| -> Result<usize, ConfigError> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(bad(k, format!("sweep value {v} is not a positive integer")))
        }
    };
    let len = cfg.problem.length;
    let levels = cfg.levels();
    match axis {
        SweepAxis::Nt => c.solver.steps = as_count(value, "sweep.values")?,
        SweepAxis::Slab => c.solver.slab = as_count(value, "sweep.values")?,
        SweepAxis::L2 => {
            if levels < 2 {
                return Err(bad("sweep.axis", "window sweep needs two or more levels".into()));
            }
            let meshes: Vec<f64> = cfg
                .level_specs()?
                .iter()
                .map(|s| s.length / s.cells as f64)
                .collect();
            c.hierarchy.ratios = meshes.windows(2).map(|w| (w[0] / w[1]).round() as usize).collect();
            c.hierarchy.cells.truncate(1);
            // level ℓ gets the target L₂^{ℓ−1}
            for l in 1..levels {
                c.hierarchy.lengths[l] = value.powi(l as i32);
            }
        }
        SweepAxis::Zeta => {
            let zeta = as_count(value, "sweep.values")?;
            let finest = cfg.finest_mesh_size();
            let meshes: Vec<f64> = (0..levels)
                .map(|l| finest * zeta.pow((levels - 1 - l) as u32) as f64)
                .collect();
            let n1 = len / meshes[0];
            if (n1 - n1.round()).abs() > 1e-9 * n1 {
                return Err(bad("sweep.values", format!("ζ = {zeta} gives a non-integer coarse cell count {n1}")));
            }
            let n1 = n1.round() as usize;
            match cfg.sweep.keep {
                ZetaKeep::Length => {
                    c.hierarchy.cells = vec![n1];
                    c.hierarchy.ratios = vec![zeta; levels - 1];
                }
                ZetaKeep::Cells => {
                    let specs = cfg.level_specs()?;
                    c.hierarchy.ratios.clear();
                    c.hierarchy.cells = specs.iter().map(|s| s.cells).collect();
                    c.hierarchy.cells[0] = n1;
                    for l in 1..levels {
                        let n = specs[l].cells;
                        if n % zeta != 0 {
                            return Err(bad("sweep.values", format!("ζ = {zeta} does not divide N{} = {n}", l + 1)));
                        }
                        c.hierarchy.lengths[l] = n as f64 * meshes[l];
                    }
                }
            }
        }
        SweepAxis::Hierarchy => {
            // N_ℓ = N₁ on every level and h_ℓ = 10^{ℓ−1}/N₁^ℓ
            let n1 = as_count(value, "sweep.values")?;
            if n1 % 10 != 0 {
                return Err(bad("sweep.values", format!("N₁ = {n1} is not a multiple of 10")));
            }
            c.hierarchy.ratios.clear();
            c.hierarchy.cells = vec![n1; levels];
            c.hierarchy.lengths = (0..levels)
                .map(|l| len * (10.0 / n1 as f64).powi(l as i32))
                .collect();
        }
    }
    c.validate()?;
    Ok(c)
}

/// Abscissa of the slope fit for a sweep value.
fn slope_abscissa(cfg: &RunConfig, axis: SweepAxis) -> f64 {
    match axis {
        SweepAxis::Nt => cfg.problem.final_time / cfg.solver.steps as f64,
        SweepAxis::Zeta => cfg.problem.length / cfg.hierarchy.cells[0] as f64,
        SweepAxis::Hierarchy => cfg.finest_lattice_cells() as f64,
        SweepAxis::L2 => cfg.hierarchy.lengths.get(1).copied().unwrap_or(cfg.problem.length),
        SweepAxis::Slab => cfg.solver.slab as f64,
    }
}

/// Least-squares slope of `log y` against `log x`; `None` with fewer than
/// two usable points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Every point of the configured sweep, run on up to `jobs` threads. Points
/// that cannot be set up or fail to solve are kept as flagged rows.
pub fn sweep(cfg: &RunConfig, jobs: usize) -> Result<Vec<ResultRow>, StudyError> {
    let Some(axis) = cfg.sweep.axis else {
        return Ok(run_rows(cfg, 0, None));
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| StudyError::Io {
            path: "thread pool".into(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let points: Vec<(usize, f64)> = cfg.sweep.values.iter().copied().enumerate().collect();
    let per_point: Vec<(Option<f64>, Vec<ResultRow>)> = pool.install(|| {
        points
            .par_iter()
            .map(|&(i, v)| match apply_axis(cfg, axis, v) {
                Ok(c) => (Some(slope_abscissa(&c, axis)), run_rows(&c, i, Some((axis, v)))),
                Err(e) => {
                    let mut row = base_row(cfg, i, Some((axis, v)), "vms");
                    row.status = format!("failed: {e}");
                    (None, vec![row])
                }
            })
            .collect()
    });
    let (lo, hi) = cfg.sweep.slope_window.unwrap_or((0, points.len().saturating_sub(1)));
    let mut rows: Vec<ResultRow> = Vec::new();
    for method in ["vms", "reference"] {
        let fit = |f: &dyn Fn(&ResultRow) -> f64| {
            let pts: Vec<(f64, f64)> = per_point
                .iter()
                .enumerate()
                .filter(|(i, _)| (lo..=hi).contains(i))
                .filter_map(|(_, (x, rs))| {
                    let r = rs.iter().find(|r| r.method == method && r.ok())?;
                    Some(((*x)?, f(r)))
                })
                .collect();
            loglog_slope(&pts)
        };
        let slope = fit(&|r| r.error);
        let slope_ms = fit(&|r| r.step_ms);
        for (_, rs) in &per_point {
            for r in rs.iter().filter(|r| r.method == method) {
                let mut r = r.clone();
                r.slope = slope;
                r.slope_step_ms = slope_ms;
                rows.push(r);
            }
        }
    }
    rows.sort_by_key(|r| (r.run_id.rsplit('-').next().and_then(|s| s.parse::<usize>().ok()), r.method != "vms"));
    Ok(rows)
}

/// Nodal values of the finest field covering each node of a uniform lattice
/// with `cells` cells per axis, axis 0 slowest.
pub fn composite_nodal(state: &LevelState, cells: usize, length: f64) -> Vec<f64> {
    let d = state.fields[0].dim();
    let bx = IndexBox::cube(d, 0, cells);
    let h = length / cells as f64;
    let mut out = Vec::with_capacity(bx.node_count());
    let mut idx = vec![0usize; d];
    for _ in 0..bx.node_count() {
        let x: Vec<f64> = idx.iter().map(|&i| i as f64 * h).collect();
        out.push(composite_value(state, &x));
        for k in (0..d).rev() {
            if idx[k] < cells {
                idx[k] += 1;
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

/// Value at a point from the finest level whose window contains it.
pub fn composite_value(state: &LevelState, x: &[f64]) -> f64 {
    for f in state.fields.iter().rev() {
        if let Ok(v) = f.evaluate_point(x) {
            return v;
        }
    }
    0.0
}

/// A dense nodal array (axis 0 slowest) as a separated field with one mode
/// per line of nodes along the last axis.
pub fn dense_to_separated(values: &[f64], cells: usize, length: f64) -> Result<SeparatedField, FieldError> {
    let n = cells + 1;
    let d = (values.len() as f64).log(n as f64).round() as usize;
    let bx = IndexBox::cube(d, 0, cells);
    let lines = n.pow(d as u32 - 1);
    let mut factors = vec![Vec::with_capacity(lines); d];
    for line in 0..lines {
        let mut rem = line;
        let mut idx = vec![0; d - 1];
        for k in (0..d - 1).rev() {
            idx[k] = rem % n;
            rem /= n;
        }
        for (k, &i) in idx.iter().enumerate() {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            factors[k].push(e);
        }
        factors[d - 1].push(values[line * n..(line + 1) * n].to_vec());
    }
    SeparatedField::new(1, length / cells as f64, bx, factors)
}

/// Comparison of the multi-level run, the single-level reference and, on
/// small meshes, the dense oracle, as three rows.
pub fn compare(cfg: &RunConfig) -> Result<Vec<ResultRow>, StudyError> {
    let problem = cfg.build_problem();
    let cells = cfg.finest_lattice_cells();
    let oracle = if cells <= oracle_limit(cfg.problem.dim) {
        Some(
            dense_cn_oracle(problem.as_ref(), cells, cfg.solver.steps).map_err(|source| StudyError::Oracle {
                run: cfg.name.clone(),
                source,
            })?,
        )
    } else {
        None
    };
    let max_diff = |traj: &[Vec<f64>]| -> Option<f64> {
        let o = oracle.as_ref()?;
        Some(
            traj.iter()
                .zip(o)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max),
        )
    };
    let len = cfg.problem.length;
    let mut rows = Vec::new();

    let mut vms_traj = Vec::new();
    let mut row = base_row(cfg, 0, None, "vms");
    let outcome = solve(cfg, &mut |s| {
        if oracle.is_some() {
            vms_traj.push(composite_nodal(s, cells, len));
        }
    });
    fill(&mut row, outcome.map(|r| RunSummary::from_report(&r)));
    row.max_nodal_diff = max_diff(&vms_traj);
    rows.push(row);

    let mut ref_traj = Vec::new();
    let mut row = base_row(cfg, 0, None, "reference");
    let mut c = cfg.clone();
    c.hierarchy.cells = vec![cells];
    c.hierarchy.lengths = vec![len];
    c.solver.modes = vec![cfg.reference.modes];
    c.solver.slab = 1;
    let outcome = solve(&c, &mut |s| {
        if oracle.is_some() {
            ref_traj.push(s.fields[0].to_dense());
        }
    });
    fill(&mut row, outcome.map(|r| RunSummary::from_report(&r)));
    row.max_nodal_diff = max_diff(&ref_traj);
    rows.push(row);

    if let Some(o) = &oracle {
        let mut row = base_row(cfg, 0, None, "oracle");
        row.error = oracle_error(problem.as_ref(), o, cells, cfg.solver.steps, cfg.solver.error_points)?;
        row.max_nodal_diff = Some(0.0);
        rows.push(row);
    }
    Ok(rows)
}

/// Relative error of a dense trajectory, measured like a single-level run.
pub fn oracle_error(
    problem: &dyn Problem,
    traj: &[Vec<f64>],
    cells: usize,
    steps: usize,
    points: usize,
) -> Result<f64, StudyError> {
    let dt = problem.final_time() / steps as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (n, u) in traj.iter().enumerate().skip(1) {
        let t = n as f64 * dt;
        let field = dense_to_separated(u, cells, problem.domain_length())?;
        let exact = problem.exact_terms(t).ok_or(StudyError::Oracle {
            run: "oracle".into(),
            source: VerifyError::MissingExactSolution,
        })?;
        let bx = field.index_box().clone();
        let (e, x) = region_error(&field, &bx, &exact, points)?;
        num += e.sqrt();
        den += x.sqrt();
    }
    Ok(if den > 0.0 { num / den } else { num / steps as f64 })
}

/// Legacy structured-points text of a scalar grid.
pub fn vtk_structured_points(
    title: &str,
    dims: [usize; 3],
    origin: [f64; 3],
    spacing: [f64; 3],
    values: &[f64],
) -> String {
    let mut s = String::with_capacity(values.len() * 24 + 256);
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str(title.lines().next().unwrap_or(""));
    s.push_str("\nASCII\nDATASET STRUCTURED_POINTS\n");
    s.push_str(&format!("DIMENSIONS {} {} {}\n", dims[0], dims[1], dims[2]));
    s.push_str(&format!("ORIGIN {:?} {:?} {:?}\n", origin[0], origin[1], origin[2]));
    s.push_str(&format!("SPACING {:?} {:?} {:?}\n", spacing[0], spacing[1], spacing[2]));
    s.push_str(&format!("POINT_DATA {}\nSCALARS u double 1\nLOOKUP_TABLE default\n", values.len()));
    for v in values {
        s.push_str(&format!("{v:e}\n"));
    }
    s
}

/// Composite field sampled on the finest lattice: the whole grid in 1D/2D,
/// the plane `x₂ = slice` in 3D. Returned x-fastest as VTK expects, with
/// the grid dimensions, origin and spacing.
pub fn sample_plane(state: &LevelState, cells: usize, length: f64, slice: f64) -> (Vec<f64>, [usize; 3], [f64; 3], f64) {
    let d = state.fields[0].dim();
    let h = length / cells as f64;
    let n = cells + 1;
    let (nx, ny) = match d {
        1 => (n, 1),
        _ => (n, n),
    };
    let mut values = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x: Vec<f64> = match d {
                1 => vec![i as f64 * h],
                2 => vec![i as f64 * h, j as f64 * h],
                _ => vec![i as f64 * h, j as f64 * h, slice],
            };
            values.push(composite_value(state, &x));
        }
    }
    let z = if d == 3 { slice } else { 0.0 };
    (values, [nx, ny, 1], [0.0, 0.0, z], h)
}

/// Files written for one dumped state: one separated text file per level
/// and one structured-points file.
pub fn dump_field(state: &LevelState, dir: &Path, stem: &str, cells: usize, length: f64, slice: f64) -> Result<Vec<PathBuf>, StudyError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (l, f) in state.fields.iter().enumerate() {
        let path = dir.join(format!("{stem}_step{}_level{}.sep", state.step, l + 1));
        fs::write(&path, f.to_text()).map_err(io_err(&path))?;
        written.push(path);
    }
    let (values, dims, origin, h) = sample_plane(state, cells, length, slice);
    let title = format!("{stem} step {} t = {}", state.step, state.time);
    let path = dir.join(format!("{stem}_step{}.vtk", state.step));
    fs::write(&path, vtk_structured_points(&title, dims, origin, [h, h, h], &values)).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

/// Marches `cfg` and dumps the states at `output.dump_steps` (the final
/// step when the list is empty).
pub fn run_with_dumps(cfg: &RunConfig, dir: &Path) -> Result<(RunReport, Vec<PathBuf>), StudyError> {
    let cells = cfg.finest_lattice_cells();
    let wanted: Vec<usize> = if cfg.output.dump_steps.is_empty() {
        vec![cfg.solver.steps]
    } else {
        cfg.output.dump_steps.clone()
    };
    let mut written = Vec::new();
    let mut failure = None;
    let report = solve(cfg, &mut |s| {
        if wanted.contains(&s.step) && failure.is_none() {
            match dump_field(s, dir, &cfg.name, cells, cfg.problem.length, cfg.output.slice) {
                Ok(w) => written.extend(w),
                Err(e) => failure = Some(e),
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok((report, written)),
    }
}

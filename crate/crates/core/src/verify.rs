//! Error functionals, independent oracles and cost bookkeeping.
//!
//! The relative error of a run averages, over time steps, the L² norm of
//! `u_h − u_ex` where each part of the domain is measured with the finest
//! field covering it, and divides by the same average of `‖u_ex‖`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::assembly::SeparableSourceTerm;
use crate::grid::{IndexBox, LevelSpec};
use crate::linalg::gauss_legendre;
use crate::problems::Problem;
use crate::separated::{FieldError, SeparatedField};
use crate::td_solver::LinearSolver;
use crate::vms::{march, LevelState, MarchConfig, RunReport, VmsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("problem has no exact solution")]
    MissingExactSolution,
    #[error("oracle limited to {max} cells per axis in {dim}D, got {cells}")]
    SizeGuard { cells: usize, dim: usize, max: usize },
    #[error("dense system is singular")]
    Singular,
}

/// Square roots of the per-step integrals of `(u_h − u_ex)²` and `u_ex²`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepError {
    pub error_norm: f64,
    pub exact_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Relative error, or the mean absolute error norm when `absolute`.
    pub value: f64,
    pub per_step: Vec<StepError>,
    pub points: usize,
    /// The exact solution vanished at every step.
    pub absolute: bool,
}

impl ErrorReport {
    pub fn from_steps(per_step: Vec<StepError>, points: usize) -> Self {
        let num: f64 = per_step.iter().map(|s| s.error_norm).sum();
        let den: f64 = per_step.iter().map(|s| s.exact_norm).sum();
        let absolute = den == 0.0;
        let value = if absolute {
            num / per_step.len().max(1) as f64
        } else {
            num / den
        };
        Self {
            value,
            per_step,
            points,
            absolute,
        }
    }
}

/// Error report of a finished run.
pub fn error_report(report: &RunReport, points: usize) -> Result<ErrorReport, VerifyError> {
    let steps = report
        .steps
        .iter()
        .map(|s| s.error.ok_or(VerifyError::MissingExactSolution))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ErrorReport::from_steps(steps, points))
}

/// Gauss points of cells `lo..hi` of a lattice with mesh size `h`:
/// (cell, local coordinate in [0,1], x, √weight).
fn axis_samples(lo: usize, hi: usize, h: f64, points: usize) -> Vec<(usize, f64, f64, f64)> {
    let (gp, gw) = gauss_legendre(points);
    let mut out = Vec::with_capacity((hi - lo) * points);
    for c in lo..hi {
        for (p, w) in gp.iter().zip(&gw) {
            let u = 0.5 * (p + 1.0);
            out.push((c, u, (c as f64 + u) * h, (0.5 * w * h).sqrt()));
        }
    }
    out
}

/// `(∫_R (u_h − u_ex)², ∫_R u_ex²)` over the cells of `region` (lattice of
/// `field`), by tensor Gauss quadrature. Both integrands are assembled as one
/// separated field of weighted samples so the difference is never formed
/// from two large numbers.
pub fn region_error(
    field: &SeparatedField,
    region: &IndexBox,
    exact: &[SeparableSourceTerm],
    points: usize,
) -> Result<(f64, f64), FieldError> {
    let d = field.dim();
    let h = field.mesh_size();
    let fb = field.index_box();
    if !fb.contains_box(region) {
        return Err(FieldError::ShapeMismatch(format!(
            "region {region:?} outside field box {fb:?}"
        )));
    }
    let samples: Vec<_> = (0..d)
        .map(|k| axis_samples(region.lo[k], region.hi[k], h, points))
        .collect();
    let lens: Vec<usize> = samples.iter().map(|s| s.len()).collect();
    if lens.contains(&0) {
        return Ok((0.0, 0.0));
    }
    let sample_box = IndexBox::new(vec![0; d], lens.iter().map(|n| n - 1).collect());
    let mut exact_factors = vec![Vec::new(); d];
    for t in exact {
        for k in 0..d {
            let s = if k == 0 { t.weight } else { 1.0 };
            exact_factors[k].push(
                samples[k]
                    .iter()
                    .map(|&(_, _, x, sw)| s * sw * (t.factors[k])(x))
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let exact_field = SeparatedField::new(0, 1.0, sample_box.clone(), exact_factors.clone())?;
    let mut factors = exact_factors;
    for k in 0..d {
        for v in field.axis_factors(k) {
            let s = if k == 0 { -1.0 } else { 1.0 };
            factors[k].push(
                samples[k]
                    .iter()
                    .map(|&(c, u, _, sw)| {
                        let j = c - fb.lo[k];
                        s * sw * (v[j] * (1.0 - u) + v[j + 1] * u)
                    })
                    .collect(),
            );
        }
    }
    let diff = SeparatedField::new(0, 1.0, sample_box, factors)?;
    Ok((diff.frobenius_norm().powi(2), exact_field.frobenius_norm().powi(2)))
}

/// Error contribution of one time step: every level is measured on its own
/// window minus the parent box of its child.
pub fn step_error(problem: &dyn Problem, state: &LevelState, points: usize) -> Option<StepError> {
    let exact = problem.exact_terms(state.time)?;
    let mut err = 0.0;
    let mut ex = 0.0;
    let levels = state.levels();
    let order: Vec<usize> = (0..problem.dim()).collect();
    for i in 0..levels {
        let own = state.fields[i].index_box().clone();
        let regions = match state.placements.get(i + 1).and_then(|p| p.as_ref()) {
            Some(child) => own.region_difference(&child.parent_box(), &order),
            None => vec![own],
        };
        for r in regions {
            let (e, x) = region_error(&state.fields[i], &r, &exact, points).ok()?;
            err += e;
            ex += x;
        }
    }
    Some(StepError {
        error_norm: err.max(0.0).sqrt(),
        exact_norm: ex.max(0.0).sqrt(),
    })
}

/// Single-level separated reference on a uniform mesh of `cells` per axis.
pub fn td_reference(
    problem: &dyn Problem,
    cells: usize,
    steps: usize,
    modes: usize,
    solver: LinearSolver,
) -> Result<RunReport, VmsError> {
    let mut cfg = MarchConfig::new(
        problem.dim(),
        vec![LevelSpec {
            cells,
            length: problem.domain_length(),
        }],
        vec![modes],
        steps,
    );
    cfg.solver = solver;
    march(problem, &cfg)
}

/// Largest oracle size per dimension.
pub fn oracle_limit(dim: usize) -> usize {
    if dim >= 3 {
        16
    } else {
        32
    }
}

/// Nodal trajectory (initial state first, axis 0 slowest) of the
/// Crank–Nicolson scheme on a uniform mesh, assembled element by element
/// into dense matrices and solved directly.
pub fn dense_cn_oracle(problem: &dyn Problem, cells: usize, steps: usize) -> Result<Vec<Vec<f64>>, VerifyError> {
    let d = problem.dim();
    let max = oracle_limit(d);
    if cells > max || cells == 0 {
        return Err(VerifyError::SizeGuard { cells, dim: d, max });
    }
    let n = cells + 1;
    let total = n.pow(d as u32);
    let h = problem.domain_length() / cells as f64;
    let dt = problem.final_time() / steps as f64;
    let nu = problem.nu();
    let strides: Vec<usize> = (0..d).map(|k| n.pow((d - 1 - k) as u32)).collect();
    let multi = |mut idx: usize| -> Vec<usize> {
        let mut out = vec![0; d];
        for k in 0..d {
            out[k] = idx / strides[k];
            idx %= strides[k];
        }
        out
    };
    let on_boundary = |m: &[usize]| m.iter().any(|&i| i == 0 || i == cells);

    let (gp, gw) = gauss_legendre(2);
    let corners = 1usize << d;
    let quad = gp.len().pow(d as u32);
    // basis values and gradients of the 2^d local hats at each quadrature point
    let mut phi = vec![vec![0.0; corners]; quad];
    let mut grad = vec![vec![vec![0.0; d]; corners]; quad];
    let mut qw = vec![0.0; quad];
    let mut qx = vec![vec![0.0; d]; quad];
    for q in 0..quad {
        let mut w = 1.0;
        let mut rem = q;
        for k in 0..d {
            let p = rem % gp.len();
            rem /= gp.len();
            qx[q][k] = 0.5 * (gp[p] + 1.0);
            w *= 0.5 * gw[p] * h;
        }
        qw[q] = w;
        for a in 0..corners {
            let mut v = 1.0;
            for k in 0..d {
                let bit = (a >> k) & 1;
                v *= if bit == 1 { qx[q][k] } else { 1.0 - qx[q][k] };
            }
            phi[q][a] = v;
            for s in 0..d {
                let mut g = 1.0;
                for k in 0..d {
                    let bit = (a >> k) & 1;
                    g *= if k == s {
                        if bit == 1 {
                            1.0 / h
                        } else {
                            -1.0 / h
                        }
                    } else if bit == 1 {
                        qx[q][k]
                    } else {
                        1.0 - qx[q][k]
                    };
                }
                grad[q][a][s] = g;
            }
        }
    }

    let mut mass = DMatrix::<f64>::zeros(total, total);
    let mut stiff = DMatrix::<f64>::zeros(total, total);
    let cell_count = cells.pow(d as u32);
    let cell_nodes = |c: usize| -> (Vec<usize>, Vec<usize>) {
        let mut cm = vec![0; d];
        let mut rem = c;
        for k in (0..d).rev() {
            cm[k] = rem % cells;
            rem /= cells;
        }
        let nodes = (0..corners)
            .map(|a| (0..d).map(|k| (cm[k] + ((a >> k) & 1)) * strides[k]).sum())
            .collect();
        (cm, nodes)
    };
    for c in 0..cell_count {
        let (_, nodes) = cell_nodes(c);
        for q in 0..quad {
            for a in 0..corners {
                for b in 0..corners {
                    mass[(nodes[a], nodes[b])] += qw[q] * phi[q][a] * phi[q][b];
                    let g: f64 = (0..d).map(|s| grad[q][a][s] * grad[q][b][s]).sum();
                    stiff[(nodes[a], nodes[b])] += qw[q] * g;
                }
            }
        }
    }
    let lhs_full = &mass / dt + &stiff * (0.5 * nu);
    let rhs_mat = &mass / dt - &stiff * (0.5 * nu);
    let mut lhs = lhs_full.clone();
    let boundary: Vec<bool> = (0..total).map(|i| on_boundary(&multi(i))).collect();
    for i in 0..total {
        if boundary[i] {
            lhs.row_mut(i).fill(0.0);
            lhs[(i, i)] = 1.0;
        }
    }
    let lu = lhs.lu();

    let load = |t: f64| -> DVector<f64> {
        let mut f = DVector::zeros(total);
        for c in 0..cell_count {
            let (cm, nodes) = cell_nodes(c);
            for q in 0..quad {
                let x: Vec<f64> = (0..d).map(|k| (cm[k] as f64 + qx[q][k]) * h).collect();
                let v = problem.source_value(&x, t) * qw[q];
                for a in 0..corners {
                    f[nodes[a]] += v * phi[q][a];
                }
            }
        }
        f
    };

    let init = problem.initial_terms();
    let mut u = DVector::from_fn(total, |i, _| {
        let m = multi(i);
        let x: Vec<f64> = m.iter().map(|&j| j as f64 * h).collect();
        init.iter().map(|t| t.evaluate(&x)).sum()
    });
    let mut out = vec![u.as_slice().to_vec()];
    for s in 1..=steps {
        let t_mid = (s as f64 - 0.5) * dt;
        let mut b = &rhs_mat * &u + load(t_mid);
        for i in 0..total {
            if boundary[i] {
                b[i] = 0.0;
            }
        }
        u = lu.solve(&b).ok_or(VerifyError::Singular)?;
        out.push(u.as_slice().to_vec());
    }
    Ok(out)
}

/// Separated unknowns of a hierarchy: `(Σ N_ℓ Q_ℓ)·d`.
pub fn dofs(cells: &[usize], modes: &[usize], dim: usize) -> usize {
    cells.iter().zip(modes).map(|(n, q)| n * q).sum::<usize>() * dim
}

/// Uniform-mesh resolution matched by the timing study's hierarchy, `N₁³/100`.
pub fn n_ref(n1: usize) -> usize {
    n1.pow(3) / 100
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimingStats {
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub measured_steps: usize,
}

/// Per-step wall-clock statistics after `warmup` steps.
pub fn timing_stats(report: &RunReport, warmup: usize) -> TimingStats {
    let skip = if report.steps.len() > warmup { warmup } else { 0 };
    let times: Vec<f64> = report.steps[skip..].iter().map(|s| s.seconds).collect();
    if times.is_empty() {
        return TimingStats::default();
    }
    TimingStats {
        mean_seconds: times.iter().sum::<f64>() / times.len() as f64,
        min_seconds: times.iter().cloned().fold(f64::INFINITY, f64::min),
        max_seconds: times.iter().cloned().fold(0.0, f64::max),
        measured_steps: times.len(),
    }
}

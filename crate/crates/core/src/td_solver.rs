//! Alternating-direction solver for separated linear systems
//! `Σ_α c_α ⊗_k M[α][k] · u = f` with homogeneous Dirichlet rows on the box
//! boundary, plus the operator application and right-hand-side folding it
//! needs.
//!
//! Each sweep freezes all axes but one and solves for that axis's factors of
//! all Q modes at once, from a block system whose Q×Q coupling weights are
//! Gram contractions of the frozen factors.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::assembly::OperatorFactorSum;
use crate::linalg::{dense_solve, dot, BandMatrix, LinalgError};
use crate::separated::{Compression, FieldError, SeparatedField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("singular direction system on axis {axis}: {source}")]
    SingularSystem {
        axis: usize,
        #[source]
        source: LinalgError,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all first-axis factors are zero")]
    ZeroField,
}

impl From<FieldError> for SolverError {
    fn from(e: FieldError) -> Self {
        SolverError::ShapeMismatch(e.to_string())
    }
}

/// Stopping rules of the inner (sweep) and inter-scale iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveCriteria {
    pub td_tol: f64,
    pub scale_tol: f64,
    pub rho_max: usize,
    pub theta_max: usize,
}

impl Default for SolveCriteria {
    fn default() -> Self {
        Self {
            td_tol: 1e-2,
            scale_tol: 1e-3,
            rho_max: 50,
            theta_max: 30,
        }
    }
}

/// Factorization used for direction systems. Both use partial pivoting;
/// `Banded` exploits the node-major interleaving of unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolver {
    #[default]
    Banded,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub converged: bool,
    pub metric: f64,
    pub modes: usize,
}

const PIVOT_THRESHOLD: f64 = 1e-13;
const RIDGE: f64 = 1e-12;

/// `op · u`: one output mode per (term, mode) pair.
pub fn apply_operator(op: &OperatorFactorSum, u: &SeparatedField) -> Result<SeparatedField, SolverError> {
    if u.index_box() != &op.trial.bx {
        return Err(SolverError::ShapeMismatch(format!(
            "operator expects trial box {:?}, field has {:?}",
            op.trial.bx,
            u.index_box()
        )));
    }
    let d = op.dim();
    let q = u.rank();
    let products = pool_products(op, u.factors(), &(0..d).collect::<Vec<_>>());
    let mut out = SeparatedField::zeros(op.test.level, op.test.mesh_size, op.test.bx.clone());
    for t in 0..op.term_count() {
        let c = op.coeff(t);
        for m in 0..q {
            let mut mode: Vec<Vec<f64>> = (0..d)
                .map(|k| products[op.factor_id(t, k)][m].clone())
                .collect();
            mode[0].iter_mut().for_each(|x| *x *= c);
            out.push_mode(mode);
        }
    }
    Ok(out)
}

/// `products[pool_id][q] = M · F[axis(pool_id)][q]` for the axes in `axes`.
fn pool_products(op: &OperatorFactorSum, factors: &[Vec<Vec<f64>>], axes: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let mut products = vec![Vec::new(); op.pool().len()];
    for t in 0..op.term_count() {
        for &k in axes {
            let id = op.factor_id(t, k);
            if products[id].is_empty() {
                products[id] = factors[k].iter().map(|v| op.pool()[id].matvec(v)).collect();
            }
        }
    }
    products
}

/// `rhs − Σ op_i · u_i`, with parallel modes merged. Products living on a sub-box of the
/// right-hand side are extended by zero.
pub fn fold_rhs(
    rhs: &SeparatedField,
    known: &[(&OperatorFactorSum, &SeparatedField)],
    tol: f64,
) -> Result<SeparatedField, SolverError> {
    if known.is_empty() {
        return Ok(rhs.clone());
    }
    let mut out = rhs.clone();
    for (op, u) in known {
        if u.rank() == 0 {
            continue;
        }
        let mut p = apply_operator(op, u)?;
        if p.index_box() != rhs.index_box() {
            if !rhs.index_box().contains_box(p.index_box()) {
                return Err(SolverError::ShapeMismatch(format!(
                    "term on {:?} outside right-hand side box {:?}",
                    p.index_box(),
                    rhs.index_box()
                )));
            }
            p = p.restrict_to(rhs.index_box());
        }
        out = out.sub(&p)?;
    }
    Ok(out.compress(Compression::merge_only(tol)))
}

/// Scales the first-axis factors to joint unit norm, moving the scale to the
/// second axis.
pub fn normalize_x(field: &SeparatedField) -> Result<SeparatedField, SolverError> {
    let mut f = field.clone().into_factors();
    normalize_factors(&mut f)?;
    Ok(field.with_factors(f)?)
}

fn normalize_factors(f: &mut [Vec<Vec<f64>>]) -> Result<(), SolverError> {
    let s = f[0].iter().map(|v| dot(v, v)).sum::<f64>().sqrt();
    if s == 0.0 {
        return Err(SolverError::ZeroField);
    }
    if s == 1.0 {
        return Ok(());
    }
    f[0].iter_mut().flatten().for_each(|x| *x /= s);
    if f.len() > 1 {
        f[1].iter_mut().flatten().for_each(|x| *x *= s);
    } else {
        // one-dimensional fields keep their scale on the only axis
        f[0].iter_mut().flatten().for_each(|x| *x *= s);
    }
    Ok(())
}

/// Block system for one axis with unknowns interleaved node-major.
#[derive(Debug, Clone)]
pub struct DirectionSystem {
    pub axis: usize,
    pub modes: usize,
    pub interior: usize,
    pub matrix: SystemMatrix,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum SystemMatrix {
    Band(BandMatrix),
    Dense(DMatrix<f64>),
}

impl SystemMatrix {
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SystemMatrix::Band(b) => b.to_dense(),
            SystemMatrix::Dense(d) => d.clone(),
        }
    }
}

impl DirectionSystem {
    /// Solves and returns the axis factors of every mode, with zero boundary
    /// entries.
    pub fn solve(self) -> Result<Vec<Vec<f64>>, SolverError> {
        let (q, n) = (self.modes, self.interior);
        let x = if n == 0 || q == 0 {
            Vec::new()
        } else {
            let axis = self.axis;
            let wrap = |e| SolverError::SingularSystem { axis, source: e };
            match self.matrix {
                SystemMatrix::Band(mut m) => {
                    if m.max_abs() == 0.0 {
                        vec![0.0; n * q]
                    } else {
                        match m.clone().factor(PIVOT_THRESHOLD) {
                            Ok(lu) => lu.solve(&self.rhs).map_err(wrap)?,
                            Err(_) => {
                                let ridge = RIDGE * ridge_scale(m.mean_abs_diagonal(), m.max_abs());
                                m.add_to_diagonal(ridge);
                                m.factor(0.0).map_err(wrap)?.solve(&self.rhs).map_err(wrap)?
                            }
                        }
                    }
                }
                SystemMatrix::Dense(mut m) => {
                    let max = m.amax();
                    if max == 0.0 {
                        vec![0.0; n * q]
                    } else {
                        match dense_solve(m.clone(), &self.rhs, PIVOT_THRESHOLD) {
                            Ok(x) => x,
                            Err(_) => {
                                let mean = m.diagonal().iter().map(|x| x.abs()).sum::<f64>() / m.nrows() as f64;
                                let ridge = RIDGE * ridge_scale(mean, max);
                                for i in 0..m.nrows() {
                                    m[(i, i)] += ridge;
                                }
                                dense_solve(m, &self.rhs, 0.0).map_err(wrap)?
                            }
                        }
                    }
                }
            }
        };
        Ok((0..q)
            .map(|m| {
                let mut v = vec![0.0; n + 2];
                for r in 0..n {
                    v[r + 1] = x[r * q + m];
                }
                v
            })
            .collect())
    }
}

fn ridge_scale(mean_diag: f64, max: f64) -> f64 {
    if mean_diag > 0.0 {
        mean_diag
    } else {
        max
    }
}

/// Assembles the system for the factors on `axis` with every other axis
/// frozen at `factors`.
pub fn direction_system(
    axis: usize,
    factors: &[Vec<Vec<f64>>],
    op: &OperatorFactorSum,
    rhs: &SeparatedField,
    solver: LinearSolver,
) -> DirectionSystem {
    let d = op.dim();
    let q = factors[0].len();
    let len = op.test.bx.len(axis);
    let n = len.saturating_sub(2);
    let frozen: Vec<usize> = (0..d).filter(|&k| k != axis).collect();
    let products = pool_products(op, factors, &frozen);

    // weights[t][i][m] = c_t Π_{k≠axis} ⟨F_k[i], M_t,k F_k[m]⟩
    let mut weights = Vec::with_capacity(op.term_count());
    for t in 0..op.term_count() {
        let mut w = DMatrix::from_element(q, q, op.coeff(t));
        for &k in &frozen {
            let p = &products[op.factor_id(t, k)];
            for i in 0..q {
                for m in 0..q {
                    w[(i, m)] *= dot(&factors[k][i], &p[m]);
                }
            }
        }
        weights.push(w);
    }

    let mut b = vec![0.0; n * q];
    for beta in 0..rhs.rank() {
        for i in 0..q {
            let c: f64 = frozen
                .iter()
                .map(|&k| dot(&factors[k][i], rhs.factor(k, beta)))
                .product();
            if c == 0.0 {
                continue;
            }
            let g = rhs.factor(axis, beta);
            for r in 0..n {
                b[r * q + i] += c * g[r + 1];
            }
        }
    }

    let bw = (0..op.term_count())
        .map(|t| op.factor(t, axis).half_bandwidth())
        .max()
        .unwrap_or(0);
    let kl = bw * q + q.saturating_sub(1);
    let mut matrix = match solver {
        LinearSolver::Banded => SystemMatrix::Band(BandMatrix::zeros(n * q, kl, kl)),
        LinearSolver::Dense => SystemMatrix::Dense(DMatrix::zeros(n * q, n * q)),
    };
    for (t, w) in weights.iter().enumerate() {
        let m = op.factor(t, axis);
        for r in 0..n {
            let (first, vals) = m.row(r + 1);
            for (off, &v) in vals.iter().enumerate() {
                let c = first + off;
                if c == 0 || c > n || v == 0.0 {
                    continue;
                }
                let c = c - 1;
                for i in 0..q {
                    for mm in 0..q {
                        let x = w[(i, mm)] * v;
                        if x == 0.0 {
                            continue;
                        }
                        match &mut matrix {
                            SystemMatrix::Band(bm) => bm.add(r * q + i, c * q + mm, x),
                            SystemMatrix::Dense(dm) => dm[(r * q + i, c * q + mm)] += x,
                        }
                    }
                }
            }
        }
    }
    DirectionSystem {
        axis,
        modes: q,
        interior: n,
        matrix,
        rhs: b,
    }
}

/// Starting factors: sine modes with zero boundary entries.
pub fn initial_factors(lens: &[usize], modes: usize) -> Vec<Vec<Vec<f64>>> {
    lens
        .iter()
        .map(|&len| {
            let n = (len - 1) as f64;
            (1..=modes)
                .map(|q| {
                    (0..len)
                        .map(|j| {
                            if j == 0 || j == len - 1 {
                                0.0
                            } else {
                                (q as f64 * std::f64::consts::PI * j as f64 / n).sin()
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// One alternating round over the axes in order, normalizing after the first.
/// Returns `false` when the iterate has collapsed to zero.
pub fn sweep_round(
    factors: &mut [Vec<Vec<f64>>],
    op: &OperatorFactorSum,
    rhs: &SeparatedField,
    solver: LinearSolver,
) -> Result<bool, SolverError> {
    for k in 0..op.dim() {
        factors[k] = direction_system(k, factors, op, rhs, solver).solve()?;
        if k == 0 && normalize_factors(factors).is_err() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `sqrt(Σ_k ‖X_k − X_k^old‖² / ‖X_k‖²)` over the stacked factor matrices.
pub fn sweep_metric(new: &[Vec<Vec<f64>>], old: &[Vec<Vec<f64>>]) -> f64 {
    new.iter()
        .zip(old)
        .map(|(fk, ok)| {
            let num: f64 = fk
                .iter()
                .zip(ok)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                .sum();
            let den: f64 = fk.iter().map(|v| dot(v, v)).sum();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .sqrt()
}

/// One solve of `op · u = rhs` in rank `modes` with Dirichlet data `lifting`
/// (zero when absent). Returns the last iterate even when the sweep budget
/// runs out; `SolveStats::converged` tells which.
pub fn solve_separated(
    op: &OperatorFactorSum,
    rhs: &SeparatedField,
    modes: usize,
    criteria: &SolveCriteria,
    lifting: Option<&SeparatedField>,
    solver: LinearSolver,
) -> Result<(SeparatedField, SolveStats), SolverError> {
    if op.test.bx != op.trial.bx || rhs.index_box() != &op.test.bx {
        return Err(SolverError::ShapeMismatch(
            "solve needs a square operator and a right-hand side on its box".into(),
        ));
    }
    let folded = match lifting {
        Some(l) if l.rank() > 0 => fold_rhs(rhs, &[(op, l)], Compression::DEFAULT_TOL)?,
        _ => rhs.compress(Compression::merge_only(Compression::DEFAULT_TOL)),
    };
    let base = match lifting {
        Some(l) => l.clone(),
        None => rhs.zeroed(),
    };
    let lens = op.test.bx.lens();
    if folded.rank() == 0 || modes == 0 || lens.iter().any(|&n| n < 3) {
        return Ok((
            base,
            SolveStats {
                iterations: 0,
                converged: true,
                metric: 0.0,
                modes: 0,
            },
        ));
    }
    let mut factors = initial_factors(&lens, modes);

    let mut stats = SolveStats {
        modes,
        metric: f64::INFINITY,
        ..Default::default()
    };
    for rho in 1..=criteria.rho_max {
        let old = factors.clone();
        if !sweep_round(&mut factors, op, &folded, solver)? {
            return Ok((
                base,
                SolveStats {
                    iterations: rho,
                    converged: true,
                    metric: 0.0,
                    modes,
                },
            ));
        }
        let metric = sweep_metric(&factors, &old);
        stats.iterations = rho;
        stats.metric = metric;
        if metric < criteria.td_tol {
            stats.converged = true;
            break;
        }
    }
    let v = base.with_factors(factors)?;
    let u = base.add(&v)?.compress(Compression::default());
    Ok((u, stats))
}

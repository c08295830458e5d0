//! Separated finite element operators and loads.
//!
//! Every d-dimensional bilinear form used by the solver is a short sum of
//! Kronecker products of 1D matrices between hat bases, possibly on two
//! different levels. The 1D matrices are integrated cell by cell on the finer
//! of the two lattices, where both hats are linear.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid::IndexBox;
use crate::linalg::{gauss_legendre, RowSpanMatrix};
use crate::separated::{Compression, SeparatedField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("interval ({a}, {b}) does not lie on cell boundaries of mesh size {h}")]
    MisalignedInterval { a: f64, b: f64, h: f64 },
    #[error("mesh sizes {coarse} and {fine} are not integer multiples")]
    IncompatibleMeshes { coarse: f64, fine: f64 },
    #[error("source needs more than {cap} modes to reach tolerance {tol:e}")]
    RankOverflow { cap: usize, tol: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// One axis of a hat basis: lattice nodes `lo..=hi` of mesh size `mesh_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis1d {
    pub mesh_size: f64,
    pub lo: usize,
    pub hi: usize,
}

impl Axis1d {
    pub fn new(mesh_size: f64, lo: usize, hi: usize) -> Self {
        Self { mesh_size, lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn from_box(mesh_size: f64, bx: &IndexBox, axis: usize) -> Self {
        Self::new(mesh_size, bx.lo[axis], bx.hi[axis])
    }
}

fn integer_ratio(coarse: f64, fine: f64) -> Result<usize, AssemblyError> {
    let r = coarse / fine;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 * n {
        return Err(AssemblyError::IncompatibleMeshes { coarse, fine });
    }
    Ok(n as usize)
}

fn snap(x: f64, h: f64) -> Option<usize> {
    let s = x / h;
    let n = s.round();
    (n >= 0.0 && (s - n).abs() <= 1e-9 * n.max(1.0)).then_some(n as usize)
}

/// ∫ over `interval` of `test_j^(dt) · trial_j^(ds)`, where the superscript
/// selects value (false) or derivative (true).
fn pair_1d(
    test: &Axis1d,
    trial: &Axis1d,
    interval: (f64, f64),
    test_deriv: bool,
    trial_deriv: bool,
) -> Result<RowSpanMatrix, AssemblyError> {
    let hf = test.mesh_size.min(trial.mesh_size);
    let rt = integer_ratio(test.mesh_size, hf)?;
    let rs = integer_ratio(trial.mesh_size, hf)?;
    let misaligned = || AssemblyError::MisalignedInterval {
        a: interval.0,
        b: interval.1,
        h: hf,
    };
    let fa = snap(interval.0, hf).ok_or_else(misaligned)?;
    let fb = snap(interval.1, hf).ok_or_else(misaligned)?;
    let (gp, gw) = gauss_legendre(2);
    let mut triplets = Vec::new();
    for c in fa..fb {
        // Local coordinates of the fine cell inside the enclosing cells of
        // each basis, so hat values stay exact rationals.
        let (ct, ot) = (c / rt, c % rt);
        let (cs, os) = (c / rs, c % rs);
        for (g, w) in gp.iter().zip(&gw) {
            let u = 0.5 * (g + 1.0);
            let wt = 0.5 * w * hf;
            let xt = (ot as f64 + u) / rt as f64;
            let xs = (os as f64 + u) / rs as f64;
            let tv = if test_deriv {
                [-1.0 / test.mesh_size, 1.0 / test.mesh_size]
            } else {
                [1.0 - xt, xt]
            };
            let sv = if trial_deriv {
                [-1.0 / trial.mesh_size, 1.0 / trial.mesh_size]
            } else {
                [1.0 - xs, xs]
            };
            for (a, tva) in tv.iter().enumerate() {
                let i = ct + a;
                if i < test.lo || i > test.hi {
                    continue;
                }
                for (b, svb) in sv.iter().enumerate() {
                    let j = cs + b;
                    if j < trial.lo || j > trial.hi {
                        continue;
                    }
                    triplets.push((i - test.lo, j - trial.lo, wt * tva * svb));
                }
            }
        }
    }
    Ok(RowSpanMatrix::from_triplets(test.len(), trial.len(), &triplets))
}

/// `∫ N_i N_j` over `interval`, rows on `test`, columns on `trial`.
pub fn mass_1d(test: &Axis1d, trial: &Axis1d, interval: (f64, f64)) -> Result<RowSpanMatrix, AssemblyError> {
    pair_1d(test, trial, interval, false, false)
}

/// `∫ N_i' N_j'` over `interval`.
pub fn stiffness_1d(
    test: &Axis1d,
    trial: &Axis1d,
    interval: (f64, f64),
) -> Result<RowSpanMatrix, AssemblyError> {
    pair_1d(test, trial, interval, true, true)
}

/// Which half of the Crank–Nicolson pair: `A` adds the stiffness terms
/// (implicit side), `AHat` subtracts them (explicit side).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    A,
    AHat,
}

#[derive(Debug, Clone, PartialEq)]
struct Term {
    coeff: f64,
    /// Index into the matrix pool per axis.
    factors: Vec<usize>,
}

/// `Σ_α c_α ⊗_k M[α][k]` acting from a trial box to a test box.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorFactorSum {
    pub test: Space,
    pub trial: Space,
    pub variant: Option<Variant>,
    pool: Vec<RowSpanMatrix>,
    terms: Vec<Term>,
}

impl OperatorFactorSum {
    /// General constructor: `matrices[α][k]` with coefficient `coeffs[α]`.
    pub fn from_terms(
        test: Space,
        trial: Space,
        coeffs: Vec<f64>,
        matrices: Vec<Vec<RowSpanMatrix>>,
    ) -> Self {
        assert_eq!(coeffs.len(), matrices.len());
        let mut pool = Vec::new();
        let mut terms = Vec::new();
        for (c, ms) in coeffs.into_iter().zip(matrices) {
            assert_eq!(ms.len(), test.bx.dim());
            let mut factors = Vec::new();
            for (k, m) in ms.into_iter().enumerate() {
                assert_eq!(m.nrows(), test.bx.len(k));
                assert_eq!(m.ncols(), trial.bx.len(k));
                pool.push(m);
                factors.push(pool.len() - 1);
            }
            terms.push(Term { coeff: c, factors });
        }
        Self {
            test,
            trial,
            variant: None,
            pool,
            terms,
        }
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn dim(&self) -> usize {
        self.test.bx.dim()
    }

    pub fn coeff(&self, term: usize) -> f64 {
        self.terms[term].coeff
    }

    pub fn factor(&self, term: usize, axis: usize) -> &RowSpanMatrix {
        &self.pool[self.terms[term].factors[axis]]
    }

    /// Index of the factor matrix in the shared pool; terms that reuse a
    /// matrix return the same index.
    pub fn factor_id(&self, term: usize, axis: usize) -> usize {
        self.terms[term].factors[axis]
    }

    pub fn pool(&self) -> &[RowSpanMatrix] {
        &self.pool
    }

    /// Full d-dimensional matrix (axis 0 slowest); for tests only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let rows = self.test.bx.node_count();
        let cols = self.trial.bx.node_count();
        let mut out = DMatrix::zeros(rows, cols);
        for t in 0..self.terms.len() {
            let mut k = DMatrix::from_element(1, 1, self.coeff(t));
            for axis in 0..self.dim() {
                k = k.kronecker(&self.factor(t, axis).to_dense());
            }
            out += k;
        }
        out
    }
}

/// One side of an operator: level tag, lattice box and mesh size.
#[derive(Debug, Clone, PartialEq)]
pub struct Space {
    pub level: usize,
    pub mesh_size: f64,
    pub bx: IndexBox,
}

impl Space {
    pub fn new(level: usize, mesh_size: f64, bx: IndexBox) -> Self {
        Self { level, mesh_size, bx }
    }

    pub fn axis(&self, k: usize) -> Axis1d {
        Axis1d::from_box(self.mesh_size, &self.bx, k)
    }

    pub fn region(&self) -> Vec<(f64, f64)> {
        self.bx.region(self.mesh_size)
    }
}

/// Crank–Nicolson operator `(1/Δt)·M⊗M ± (ν/2)·Σ_k K_k` between two spaces,
/// integrated over `region`.
pub fn build_operator(
    test: &Space,
    trial: &Space,
    region: &[(f64, f64)],
    dt: f64,
    nu: f64,
    variant: Variant,
) -> Result<OperatorFactorSum, AssemblyError> {
    let d = test.bx.dim();
    let mut pool = Vec::with_capacity(2 * d);
    for k in 0..d {
        pool.push(mass_1d(&test.axis(k), &trial.axis(k), region[k])?);
        pool.push(stiffness_1d(&test.axis(k), &trial.axis(k), region[k])?);
    }
    let sign = match variant {
        Variant::A => 1.0,
        Variant::AHat => -1.0,
    };
    let mut terms = vec![Term {
        coeff: 1.0 / dt,
        factors: (0..d).map(|k| 2 * k).collect(),
    }];
    for s in 0..d {
        terms.push(Term {
            coeff: sign * 0.5 * nu,
            factors: (0..d).map(|k| if k == s { 2 * k + 1 } else { 2 * k }).collect(),
        });
    }
    Ok(OperatorFactorSum {
        test: test.clone(),
        trial: trial.clone(),
        variant: Some(variant),
        pool,
        terms,
    })
}

pub type AxisFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `weight · Π_k g_k(x_k)`.
#[derive(Clone)]
pub struct SeparableSourceTerm {
    pub weight: f64,
    pub factors: Vec<AxisFn>,
}

impl SeparableSourceTerm {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.weight
            * self
                .factors
                .iter()
                .zip(x)
                .map(|(g, &xk)| g(xk))
                .product::<f64>()
    }
}

impl std::fmt::Debug for SeparableSourceTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeparableSourceTerm")
            .field("weight", &self.weight)
            .field("axes", &self.factors.len())
            .finish()
    }
}

/// `∫ N_j g` over the space's region on one axis, `points` Gauss points per cell.
pub fn load_1d(axis: &Axis1d, g: &dyn Fn(f64) -> f64, points: usize) -> Vec<f64> {
    let (gp, gw) = gauss_legendre(points);
    let h = axis.mesh_size;
    let mut out = vec![0.0; axis.len()];
    for c in axis.lo..axis.hi {
        for (p, w) in gp.iter().zip(&gw) {
            let u = 0.5 * (p + 1.0);
            let x = (c as f64 + u) * h;
            let v = 0.5 * w * h * g(x);
            out[c - axis.lo] += v * (1.0 - u);
            out[c + 1 - axis.lo] += v * u;
        }
    }
    out
}

/// Load vector of a separable source: one mode per term.
pub fn assemble_load(
    terms: &[SeparableSourceTerm],
    space: &Space,
    points: usize,
    tol: f64,
) -> SeparatedField {
    let d = space.bx.dim();
    let mut field = SeparatedField::zeros(space.level, space.mesh_size, space.bx.clone());
    for t in terms {
        if t.weight == 0.0 {
            continue;
        }
        let mut mode: Vec<Vec<f64>> = (0..d)
            .map(|k| load_1d(&space.axis(k), t.factors[k].as_ref(), points))
            .collect();
        mode[0].iter_mut().for_each(|v| *v *= t.weight);
        if mode.iter().all(|v| v.iter().any(|&x| x != 0.0)) {
            field.push_mode(mode);
        }
    }
    field.compress(Compression::tol(tol))
}

/// Load vector of an arbitrary 2D source: samples at the per-cell Gauss
/// points are SVD-truncated to `tol` and each separated factor is integrated.
pub fn assemble_load_raw(
    f: &dyn Fn(&[f64]) -> f64,
    space: &Space,
    points: usize,
    tol: f64,
    max_modes: usize,
) -> Result<SeparatedField, AssemblyError> {
    if space.bx.dim() != 2 {
        return Err(AssemblyError::Unsupported(
            "sampled sources are only separated in two dimensions".into(),
        ));
    }
    let (gp, gw) = gauss_legendre(points);
    let h = space.mesh_size;
    let samples = |axis: usize| -> Vec<(usize, f64, f64)> {
        // (cell, local coordinate, weight) per sample point
        let a = space.axis(axis);
        let mut s = Vec::new();
        for c in a.lo..a.hi {
            for (p, w) in gp.iter().zip(&gw) {
                s.push((c, 0.5 * (p + 1.0), 0.5 * w * h));
            }
        }
        s
    };
    let (sx, sy) = (samples(0), samples(1));
    let m = DMatrix::from_fn(sx.len(), sy.len(), |i, j| {
        f(&[(sx[i].0 as f64 + sx[i].1) * h, (sy[j].0 as f64 + sy[j].1) * h])
    });
    let svd = crate::linalg::svd(m);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sig: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let total = sig.iter().map(|s| s * s).sum::<f64>().sqrt();
    let mut keep = sig.len();
    let mut tail = 0.0;
    while keep > 0 {
        let t = tail + sig[keep - 1] * sig[keep - 1];
        if t.sqrt() > tol * total {
            break;
        }
        tail = t;
        keep -= 1;
    }
    if keep > max_modes {
        return Err(AssemblyError::RankOverflow { cap: max_modes, tol });
    }
    let integrate = |axis: usize, s: &[(usize, f64, f64)], vals: &mut dyn Iterator<Item = f64>| {
        let a = space.axis(axis);
        let mut out = vec![0.0; a.len()];
        for (&(c, u, w), v) in s.iter().zip(vals) {
            out[c - a.lo] += w * v * (1.0 - u);
            out[c + 1 - a.lo] += w * v * u;
        }
        out
    };
    let mut field = SeparatedField::zeros(space.level, h, space.bx.clone());
    for &i in order.iter().take(keep) {
        let s = svd.singular_values[i];
        let x = integrate(0, &sx, &mut u.column(i).iter().map(|v| v * s));
        let y = integrate(1, &sy, &mut vt.row(i).iter().copied());
        field.push_mode(vec![x, y]);
    }
    Ok(field.compress(Compression::tol(tol)))
}

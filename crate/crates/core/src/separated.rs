//! Separated (rank-Q) grid functions: `u(j₁,…,j_d) = Σ_q Π_k F[k][q][j_k]`.
//!
//! A field is tagged with its level, mesh size and the [`IndexBox`] it covers
//! on that level's lattice. Norms and compression work from thin QR factors of
//! the per-axis factor matrices, so nothing of size N^d is ever formed.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::IndexBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("index {index:?} outside field of lengths {lens:?}")]
    IndexOutOfRange { index: Vec<usize>, lens: Vec<usize> },
    #[error("point {point:?} outside the field's region")]
    OutOfDomain { point: Vec<f64> },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask indices on axis {axis} are not contiguous")]
    BoxNotRectangular { axis: usize },
    #[error("malformed field text: {0}")]
    Parse(String),
}

/// Truncation target for [`SeparatedField::compress`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compression {
    /// Relative Frobenius tolerance.
    pub tol: f64,
    pub max_modes: Option<usize>,
    /// In 3D, run the Tucker stage after the exact mode merges. Its cost grows
    /// with the cube of the lattice size.
    pub tucker: bool,
}

impl Compression {
    pub const DEFAULT_TOL: f64 = 1e-10;

    pub fn tol(tol: f64) -> Self {
        Self {
            tol,
            max_modes: None,
            tucker: true,
        }
    }

    pub fn rank(modes: usize) -> Self {
        Self {
            tol: 0.0,
            max_modes: Some(modes),
            tucker: true,
        }
    }

    /// Tolerance compression that in 3D only merges parallel modes and drops
    /// negligible ones.
    pub fn merge_only(tol: f64) -> Self {
        Self {
            tucker: false,
            ..Self::tol(tol)
        }
    }
}

impl Default for Compression {
    fn default() -> Self {
        Self::tol(Self::DEFAULT_TOL)
    }
}

/// Above this rank the 3D compressor only drops zero modes and the 3D norm
/// falls back to Gram contractions.
const CORE_RANK_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedField {
    level: usize,
    mesh_size: f64,
    bx: IndexBox,
    /// `factors[axis][mode][node]`
    factors: Vec<Vec<Vec<f64>>>,
}

impl SeparatedField {
    pub fn zeros(level: usize, mesh_size: f64, bx: IndexBox) -> Self {
        let d = bx.dim();
        Self {
            level,
            mesh_size,
            bx,
            factors: vec![Vec::new(); d],
        }
    }

    pub fn new(
        level: usize,
        mesh_size: f64,
        bx: IndexBox,
        factors: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, FieldError> {
        if factors.len() != bx.dim() {
            return Err(FieldError::ShapeMismatch(format!(
                "{} factor axes for a {}-dimensional box",
                factors.len(),
                bx.dim()
            )));
        }
        let q = factors[0].len();
        for (k, axis) in factors.iter().enumerate() {
            if axis.len() != q {
                return Err(FieldError::ShapeMismatch(format!(
                    "axis {k} has {} modes, axis 0 has {q}",
                    axis.len()
                )));
            }
            if let Some(v) = axis.iter().find(|v| v.len() != bx.len(k)) {
                return Err(FieldError::ShapeMismatch(format!(
                    "axis {k} factor of length {} in a box of length {}",
                    v.len(),
                    bx.len(k)
                )));
            }
        }
        Ok(Self {
            level,
            mesh_size,
            bx,
            factors,
        })
    }

    /// Builds a field from modes given as one vector per axis.
    pub fn from_modes(
        level: usize,
        mesh_size: f64,
        bx: IndexBox,
        modes: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, FieldError> {
        let d = bx.dim();
        let mut factors = vec![Vec::with_capacity(modes.len()); d];
        for m in modes {
            if m.len() != d {
                return Err(FieldError::ShapeMismatch(format!(
                    "mode with {} axes in dimension {d}",
                    m.len()
                )));
            }
            for (k, v) in m.into_iter().enumerate() {
                factors[k].push(v);
            }
        }
        Self::new(level, mesh_size, bx, factors)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn mesh_size(&self) -> f64 {
        self.mesh_size
    }

    pub fn index_box(&self) -> &IndexBox {
        &self.bx
    }

    pub fn dim(&self) -> usize {
        self.bx.dim()
    }

    pub fn rank(&self) -> usize {
        self.factors[0].len()
    }

    pub fn lens(&self) -> Vec<usize> {
        self.bx.lens()
    }

    pub fn factor(&self, axis: usize, mode: usize) -> &[f64] {
        &self.factors[axis][mode]
    }

    pub fn axis_factors(&self, axis: usize) -> &[Vec<f64>] {
        &self.factors[axis]
    }

    pub fn factors(&self) -> &[Vec<Vec<f64>>] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<Vec<Vec<f64>>> {
        self.factors
    }

    /// Same support, new factors.
    pub fn with_factors(&self, factors: Vec<Vec<Vec<f64>>>) -> Result<Self, FieldError> {
        Self::new(self.level, self.mesh_size, self.bx.clone(), factors)
    }

    pub fn same_support(&self, other: &SeparatedField) -> bool {
        self.bx == other.bx && self.level == other.level
    }

    pub fn push_mode(&mut self, mode: Vec<Vec<f64>>) {
        assert_eq!(mode.len(), self.dim());
        for (k, v) in mode.into_iter().enumerate() {
            assert_eq!(v.len(), self.bx.len(k));
            self.factors[k].push(v);
        }
    }

    pub fn evaluate_nodal(&self, index: &[usize]) -> Result<f64, FieldError> {
        let lens = self.lens();
        if index.len() != lens.len() || index.iter().zip(&lens).any(|(i, n)| i >= n) {
            return Err(FieldError::IndexOutOfRange {
                index: index.to_vec(),
                lens,
            });
        }
        Ok((0..self.rank())
            .map(|q| {
                index
                    .iter()
                    .enumerate()
                    .map(|(k, &j)| self.factors[k][q][j])
                    .product::<f64>()
            })
            .sum())
    }

    /// Value at a physical point by per-axis linear interpolation.
    pub fn evaluate_point(&self, x: &[f64]) -> Result<f64, FieldError> {
        if x.len() != self.dim() {
            return Err(FieldError::OutOfDomain { point: x.to_vec() });
        }
        let mut stencils = Vec::with_capacity(self.dim());
        for (k, &xk) in x.iter().enumerate() {
            match self.locate(k, xk) {
                Some(s) => stencils.push(s),
                None => return Err(FieldError::OutOfDomain { point: x.to_vec() }),
            }
        }
        Ok((0..self.rank())
            .map(|q| {
                stencils
                    .iter()
                    .enumerate()
                    .map(|(k, &(i, w))| {
                        let f = &self.factors[k][q];
                        if w == 0.0 {
                            f[i]
                        } else {
                            f[i] * (1.0 - w) + f[i + 1] * w
                        }
                    })
                    .product::<f64>()
            })
            .sum())
    }

    /// Cell index and local weight of coordinate `x` on `axis`.
    fn locate(&self, axis: usize, x: f64) -> Option<(usize, f64)> {
        let n = self.bx.len(axis);
        let s = x / self.mesh_size - self.bx.lo[axis] as f64;
        let slack = 1e-9;
        if !(s >= -slack && s <= (n - 1) as f64 + slack) {
            return None;
        }
        if n == 1 {
            return Some((0, 0.0));
        }
        let s = s.clamp(0.0, (n - 1) as f64);
        let nearest = s.round();
        if (s - nearest).abs() < 1e-10 {
            return Some((nearest as usize, 0.0));
        }
        let i = (s.floor() as usize).min(n - 2);
        Some((i, s - i as f64))
    }

    pub fn add(&self, other: &SeparatedField) -> Result<Self, FieldError> {
        if self.bx != other.bx {
            return Err(FieldError::ShapeMismatch(format!(
                "boxes {:?} and {:?} differ",
                self.bx, other.bx
            )));
        }
        let mut out = self.clone();
        for (k, axis) in other.factors.iter().enumerate() {
            out.factors[k].extend(axis.iter().cloned());
        }
        Ok(out)
    }

    pub fn sub(&self, other: &SeparatedField) -> Result<Self, FieldError> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.factors[0] {
            v.iter_mut().for_each(|x| *x *= s);
        }
        out
    }

    /// Zeroes every factor outside the local half-open index ranges.
    pub fn mask(&self, ranges: &[Range<usize>]) -> Result<Self, FieldError> {
        let lens = self.lens();
        if ranges.len() != lens.len() {
            return Err(FieldError::ShapeMismatch("mask dimension".into()));
        }
        for (r, &n) in ranges.iter().zip(&lens) {
            if r.end > n {
                return Err(FieldError::IndexOutOfRange {
                    index: ranges.iter().map(|r| r.end).collect(),
                    lens,
                });
            }
        }
        if ranges.iter().any(|r| r.is_empty()) {
            return Ok(self.zeroed());
        }
        let mut out = self.clone();
        for (k, r) in ranges.iter().enumerate() {
            for v in &mut out.factors[k] {
                for (j, x) in v.iter_mut().enumerate() {
                    if !r.contains(&j) {
                        *x = 0.0;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Mask given explicit per-axis local index lists, which must be contiguous.
    pub fn mask_indices(&self, indices: &[Vec<usize>]) -> Result<Self, FieldError> {
        let mut ranges = Vec::with_capacity(indices.len());
        for (axis, idx) in indices.iter().enumerate() {
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(FieldError::BoxNotRectangular { axis });
            }
            ranges.push(match (sorted.first(), sorted.last()) {
                (Some(&a), Some(&b)) => a..b + 1,
                _ => 0..0,
            });
        }
        self.mask(&ranges)
    }

    /// Keeps only nodes inside `bx`, given in the field's lattice indices.
    pub fn mask_box(&self, bx: &IndexBox) -> Self {
        match self.bx.intersect(bx) {
            None => self.zeroed(),
            Some(b) => {
                let ranges: Vec<_> = (0..self.dim())
                    .map(|k| b.lo[k] - self.bx.lo[k]..b.hi[k] - self.bx.lo[k] + 1)
                    .collect();
                self.mask(&ranges).expect("intersection lies inside the box")
            }
        }
    }

    /// Re-expresses the field on `target` (same lattice): values are copied
    /// where the boxes overlap and are zero elsewhere.
    pub fn restrict_to(&self, target: &IndexBox) -> Self {
        let Some(inter) = self.bx.intersect(target) else {
            return Self::zeros(self.level, self.mesh_size, target.clone());
        };
        let factors = (0..self.dim())
            .map(|k| {
                self.factors[k]
                    .iter()
                    .map(|v| {
                        let mut w = vec![0.0; target.len(k)];
                        for g in inter.lo[k]..=inter.hi[k] {
                            w[g - target.lo[k]] = v[g - self.bx.lo[k]];
                        }
                        w
                    })
                    .collect()
            })
            .collect();
        let mut out = Self {
            level: self.level,
            mesh_size: self.mesh_size,
            bx: target.clone(),
            factors,
        };
        out.prune_zero_modes();
        out
    }

    pub fn zeroed(&self) -> Self {
        Self::zeros(self.level, self.mesh_size, self.bx.clone())
    }

    /// Drops modes with an identically zero factor.
    pub fn prune_zero_modes(&mut self) {
        let keep: Vec<bool> = (0..self.rank())
            .map(|q| {
                self.factors
                    .iter()
                    .all(|axis| axis[q].iter().any(|&x| x != 0.0))
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return;
        }
        for axis in &mut self.factors {
            let mut it = keep.iter();
            axis.retain(|_| *it.next().unwrap());
        }
    }

    /// Folds together modes whose factors are collinear on all axes but one.
    pub fn merge_parallel_modes(&mut self) {
        let d = self.dim();
        let mut kept: Vec<Vec<Vec<f64>>> = Vec::new();
        'modes: for q in 0..self.rank() {
            let mode: Vec<Vec<f64>> = (0..d).map(|k| self.factors[k][q].clone()).collect();
            for p in kept.iter_mut() {
                let mut ratios = vec![None; d];
                for k in 0..d {
                    ratios[k] = collinear_ratio(&p[k], &mode[k]);
                }
                let free: Vec<usize> = (0..d).filter(|&k| ratios[k].is_none()).collect();
                let axis = match free.len() {
                    0 => 0,
                    1 => free[0],
                    _ => continue,
                };
                let c: f64 = (0..d)
                    .filter(|&k| k != axis)
                    .map(|k| ratios[k].unwrap())
                    .product();
                for (a, b) in p[axis].iter_mut().zip(&mode[axis]) {
                    *a += c * b;
                }
                continue 'modes;
            }
            kept.push(mode);
        }
        if kept.len() < self.rank() {
            let mut factors = vec![Vec::with_capacity(kept.len()); d];
            for m in kept {
                for (k, v) in m.into_iter().enumerate() {
                    factors[k].push(v);
                }
            }
            self.factors = factors;
            self.prune_zero_modes();
        }
    }

    /// Drops modes whose norm product is at most `threshold`.
    pub fn drop_modes_below(&mut self, threshold: f64) {
        let keep: Vec<bool> = (0..self.rank())
            .map(|q| (0..self.dim()).map(|k| norm(&self.factors[k][q])).product::<f64>() > threshold)
            .collect();
        for axis in &mut self.factors {
            let mut it = keep.iter();
            axis.retain(|_| *it.next().unwrap());
        }
    }

    /// Rescales each mode so all its factors have the same norm.
    pub fn balance(&mut self) {
        let d = self.dim();
        for q in 0..self.rank() {
            let norms: Vec<f64> = (0..d).map(|k| norm(&self.factors[k][q])).collect();
            let prod: f64 = norms.iter().product();
            if prod == 0.0 {
                continue;
            }
            let target = prod.powf(1.0 / d as f64);
            for (k, n) in norms.iter().enumerate() {
                let s = target / n;
                self.factors[k][q].iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    /// Σ_q Π_k ‖F[k][q]‖, the scale at which round-off in the sum lives.
    pub fn mode_scale(&self) -> f64 {
        (0..self.rank())
            .map(|q| (0..self.dim()).map(|k| norm(&self.factors[k][q])).product::<f64>())
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        let q = self.rank();
        if q == 0 {
            return 0.0;
        }
        match self.dim() {
            1 => norm(&self.mode_sum_1d()),
            2 => {
                let rx = self.r_factor(0);
                let ry = self.r_factor(1);
                (rx * ry.transpose()).norm()
            }
            _ if q <= CORE_RANK_LIMIT => self.core_tensor().norm(),
            _ => self.gram_norm(),
        }
    }

    /// Norm through per-axis Gram matrices; loses accuracy near cancellation.
    pub fn gram_norm(&self) -> f64 {
        let q = self.rank();
        let grams: Vec<DMatrix<f64>> = (0..self.dim()).map(|k| self.gram(k)).collect();
        let mut s = 0.0;
        for a in 0..q {
            for b in 0..q {
                s += grams.iter().map(|g| g[(a, b)]).product::<f64>();
            }
        }
        s.max(0.0).sqrt()
    }

    fn gram(&self, axis: usize) -> DMatrix<f64> {
        let m = self.factor_matrix(axis);
        m.transpose() * &m
    }

    fn mode_sum_1d(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.bx.len(0)];
        for v in &self.factors[0] {
            for (a, b) in s.iter_mut().zip(v) {
                *a += b;
            }
        }
        s
    }

    pub fn factor_matrix(&self, axis: usize) -> DMatrix<f64> {
        let n = self.bx.len(axis);
        let q = self.rank();
        DMatrix::from_fn(n, q, |i, j| self.factors[axis][j][i])
    }

    fn qr(&self, axis: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let qr = self.factor_matrix(axis).qr();
        (qr.q(), qr.r())
    }

    fn r_factor(&self, axis: usize) -> DMatrix<f64> {
        self.factor_matrix(axis).qr().r()
    }

    /// Core tensor C[a,b,c] = Σ_q R₀[a,q] R₁[b,q] R₂[c,q], stored with the
    /// first index fastest.
    fn core_tensor(&self) -> DVector<f64> {
        let r: Vec<DMatrix<f64>> = (0..3).map(|k| self.r_factor(k)).collect();
        core_from_r(&r)
    }

    pub fn compress(&self, c: Compression) -> Self {
        let q = self.rank();
        if q == 0 {
            return self.clone();
        }
        if let Some(m) = c.max_modes {
            if c.tol == 0.0 && m >= q {
                return self.clone();
            }
        }
        let out = match self.dim() {
            1 => {
                let s = self.mode_sum_1d();
                let mut f = self.zeroed();
                if s.iter().any(|&x| x != 0.0) {
                    f.factors[0].push(s);
                }
                f
            }
            2 => self.compress_2d(c),
            _ => {
                let mut merged = self.clone();
                merged.prune_zero_modes();
                merged.merge_parallel_modes();
                merged.drop_modes_below(self.floor());
                if c.tucker && merged.rank() <= CORE_RANK_LIMIT && merged.rank() > 1 {
                    let tucker = merged.compress_3d(c);
                    if tucker.rank() < merged.rank() {
                        merged = tucker;
                    }
                }
                merged
            }
        };
        if out.rank() < q || out.rank() == 0 {
            out
        } else {
            self.clone()
        }
    }

    fn floor(&self) -> f64 {
        64.0 * f64::EPSILON * self.mode_scale()
    }

    fn compress_2d(&self, c: Compression) -> Self {
        let (qx, rx) = self.qr(0);
        let (qy, ry) = self.qr(1);
        let m = &rx * ry.transpose();
        let svd = crate::linalg::svd(m);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let order = descending(&svd.singular_values);
        let sig: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let total = norm(&sig);
        let keep = truncation_rank(&sig, (c.tol * total).max(self.floor()), c.max_modes);
        let mut out = self.zeroed();
        for &i in order.iter().take(keep) {
            let s = svd.singular_values[i].sqrt();
            let x = &qx * u.column(i) * s;
            let y = &qy * vt.row(i).transpose() * s;
            out.factors[0].push(x.as_slice().to_vec());
            out.factors[1].push(y.as_slice().to_vec());
        }
        out
    }

    fn compress_3d(&self, c: Compression) -> Self {
        let qr: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..3).map(|k| self.qr(k)).collect();
        let r: Vec<DMatrix<f64>> = qr.iter().map(|(_, r)| r.clone()).collect();
        let dims: Vec<usize> = r.iter().map(|m| m.nrows()).collect();
        let core = core_from_r(&r);
        let total = core.norm();
        let floor = self.floor();
        if total <= floor {
            return self.zeroed();
        }
        // Truncated HOSVD of the core.
        let stage_tol = 0.5 * c.tol * total / 3f64.sqrt();
        let mut bases = Vec::with_capacity(3);
        for k in 0..3 {
            let unf = unfold(&core, &dims, k);
            let svd = crate::linalg::svd(unf);
            let u = svd.u.unwrap();
            let order = descending(&svd.singular_values);
            let sig: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
            let keep = truncation_rank(&sig, stage_tol.max(floor), None).max(1);
            let cols: Vec<_> = order.iter().take(keep).map(|&i| u.column(i).into_owned()).collect();
            bases.push(DMatrix::from_columns(&cols));
        }
        // G = C ×₀ U₀ᵀ ×₁ U₁ᵀ ×₂ U₂ᵀ
        let s: Vec<usize> = bases.iter().map(|b| b.ncols()).collect();
        let g = multilinear(&core, &dims, &bases);
        // Re-CP through SVDs of slices along the axis with the fewest components.
        let axis = (0..3).min_by_key(|&k| s[k]).unwrap();
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let slice_tol = 0.5 * c.tol * total / (s[axis] as f64).sqrt();
        let mut out = self.zeroed();
        for t in 0..s[axis] {
            let slice = DMatrix::from_fn(s[a], s[b], |i, j| {
                let mut idx = [0usize; 3];
                idx[axis] = t;
                idx[a] = i;
                idx[b] = j;
                g[idx[0] + s[0] * (idx[1] + s[1] * idx[2])]
            });
            let svd = crate::linalg::svd(slice);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let order = descending(&svd.singular_values);
            let sig: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
            let keep = truncation_rank(&sig, slice_tol.max(floor), None);
            for &i in order.iter().take(keep) {
                let sv = svd.singular_values[i];
                let mut mode = vec![Vec::new(); 3];
                let va = &bases[a] * u.column(i);
                let vb = &bases[b] * vt.row(i).transpose();
                let vc = bases[axis].column(t).into_owned();
                mode[a] = (&qr[a].0 * va * sv).as_slice().to_vec();
                mode[b] = (&qr[b].0 * vb).as_slice().to_vec();
                mode[axis] = (&qr[axis].0 * vc).as_slice().to_vec();
                out.push_mode(mode);
            }
        }
        if let Some(m) = c.max_modes {
            if out.rank() > m {
                out = out.truncate_greedy(m);
            }
        }
        out.balance();
        out
    }

    /// Keeps the `m` modes with the largest norm products.
    fn truncate_greedy(&self, m: usize) -> Self {
        let mut idx: Vec<usize> = (0..self.rank()).collect();
        let w: Vec<f64> = idx
            .iter()
            .map(|&q| (0..self.dim()).map(|k| norm(&self.factors[k][q])).product())
            .collect();
        idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
        idx.truncate(m);
        idx.sort_unstable();
        let factors = self
            .factors
            .iter()
            .map(|axis| idx.iter().map(|&q| axis[q].clone()).collect())
            .collect();
        Self {
            factors,
            ..self.clone()
        }
    }

    /// Full tensor, axis 0 slowest.
    pub fn to_dense(&self) -> Vec<f64> {
        let lens = self.lens();
        let total: usize = lens.iter().product();
        let mut out = vec![0.0; total];
        let mut idx = vec![0usize; lens.len()];
        for (flat, v) in out.iter_mut().enumerate() {
            let mut r = flat;
            for k in (0..lens.len()).rev() {
                idx[k] = r % lens[k];
                r /= lens[k];
            }
            *v = (0..self.rank())
                .map(|q| {
                    idx.iter()
                        .enumerate()
                        .map(|(k, &j)| self.factors[k][q][j])
                        .product::<f64>()
                })
                .sum();
        }
        out
    }

    /// Plain-text form: header lines then one factor vector per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(s, "separated-field 1").unwrap();
        writeln!(s, "dim {}", self.dim()).unwrap();
        writeln!(s, "modes {}", self.rank()).unwrap();
        writeln!(s, "lengths {}", join(&self.lens())).unwrap();
        writeln!(s, "level {}", self.level).unwrap();
        writeln!(s, "mesh_size {:.16e}", self.mesh_size).unwrap();
        writeln!(s, "lower {}", join(&self.bx.lo)).unwrap();
        for axis in &self.factors {
            for v in axis {
                let line: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
                writeln!(s, "{}", line.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FieldError> {
        let err = |m: &str| FieldError::Parse(m.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<Vec<String>, FieldError> {
            let line = lines.next().ok_or_else(|| err("truncated header"))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(FieldError::Parse(format!("expected `{key}`")));
            }
            Ok(it.map(str::to_string).collect())
        };
        let nums = |v: Vec<String>| -> Result<Vec<usize>, FieldError> {
            v.iter()
                .map(|x| x.parse().map_err(|_| err("bad integer")))
                .collect()
        };
        if header("separated-field")? != ["1"] {
            return Err(err("unsupported version"));
        }
        let d = *nums(header("dim")?)?.first().ok_or_else(|| err("dim"))?;
        let q = *nums(header("modes")?)?.first().ok_or_else(|| err("modes"))?;
        let lens = nums(header("lengths")?)?;
        let level = *nums(header("level")?)?.first().ok_or_else(|| err("level"))?;
        let h: f64 = header("mesh_size")?
            .first()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| err("mesh_size"))?;
        let lo = nums(header("lower")?)?;
        if lens.len() != d || lo.len() != d || lens.contains(&0) {
            return Err(err("header dimensions disagree"));
        }
        let hi: Vec<usize> = lo.iter().zip(&lens).map(|(l, n)| l + n - 1).collect();
        let mut factors = vec![Vec::with_capacity(q); d];
        for (k, axis) in factors.iter_mut().enumerate() {
            for _ in 0..q {
                let line = lines.next().ok_or_else(|| err("missing factor line"))?;
                let v: Vec<f64> = line
                    .split_whitespace()
                    .map(|x| x.parse().map_err(|_| err("bad number")))
                    .collect::<Result<_, _>>()?;
                if v.len() != lens[k] {
                    return Err(err("factor length disagrees with header"));
                }
                axis.push(v);
            }
        }
        if lines.next().is_some() {
            return Err(err("trailing data"));
        }
        Self::new(level, h, IndexBox::new(lo, hi), factors)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Some(c)` when `b = c·a` to round-off.
fn collinear_ratio(a: &[f64], b: &[f64]) -> Option<f64> {
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 {
        return None;
    }
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let c = ab / aa;
    let resid: f64 = a.iter().zip(b).map(|(x, y)| (y - c * x).powi(2)).sum();
    (resid <= 1e-24 * bb.max(f64::MIN_POSITIVE)).then_some(c)
}

fn descending(s: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    idx
}

/// Smallest r with sqrt(Σ_{i≥r} σ_i²) ≤ threshold, capped by `max`.
fn truncation_rank(sig: &[f64], threshold: f64, max: Option<usize>) -> usize {
    let mut tail = 0.0;
    let mut r = sig.len();
    while r > 0 {
        let t = tail + sig[r - 1] * sig[r - 1];
        if t.sqrt() > threshold {
            break;
        }
        tail = t;
        r -= 1;
    }
    match max {
        Some(m) => r.min(m),
        None => r,
    }
}

fn core_from_r(r: &[DMatrix<f64>]) -> DVector<f64> {
    let (n0, n1, n2) = (r[0].nrows(), r[1].nrows(), r[2].nrows());
    let q = r[0].ncols();
    let mut c = DVector::zeros(n0 * n1 * n2);
    for k in 0..q {
        for c2 in 0..n2 {
            let z = r[2][(c2, k)];
            if z == 0.0 {
                continue;
            }
            for c1 in 0..n1 {
                let yz = r[1][(c1, k)] * z;
                if yz == 0.0 {
                    continue;
                }
                let base = n0 * (c1 + n1 * c2);
                for c0 in 0..n0 {
                    c[base + c0] += r[0][(c0, k)] * yz;
                }
            }
        }
    }
    c
}

/// Mode-k unfolding of a 3-tensor stored first-index-fastest.
fn unfold(t: &DVector<f64>, dims: &[usize], k: usize) -> DMatrix<f64> {
    let others: usize = dims.iter().product::<usize>() / dims[k];
    let mut m = DMatrix::zeros(dims[k], others);
    for c2 in 0..dims[2] {
        for c1 in 0..dims[1] {
            for c0 in 0..dims[0] {
                let v = t[c0 + dims[0] * (c1 + dims[1] * c2)];
                let (row, col) = match k {
                    0 => (c0, c1 + dims[1] * c2),
                    1 => (c1, c0 + dims[0] * c2),
                    _ => (c2, c0 + dims[0] * c1),
                };
                m[(row, col)] = v;
            }
        }
    }
    m
}

/// Applies `bases[k]ᵀ` along every axis.
fn multilinear(t: &DVector<f64>, dims: &[usize], bases: &[DMatrix<f64>]) -> DVector<f64> {
    let s: Vec<usize> = bases.iter().map(|b| b.ncols()).collect();
    let mut out = DVector::zeros(s[0] * s[1] * s[2]);
    for g2 in 0..s[2] {
        for g1 in 0..s[1] {
            for g0 in 0..s[0] {
                let mut acc = 0.0;
                for c2 in 0..dims[2] {
                    let w2 = bases[2][(c2, g2)];
                    for c1 in 0..dims[1] {
                        let w12 = w2 * bases[1][(c1, g1)];
                        let base = dims[0] * (c1 + dims[1] * c2);
                        for c0 in 0..dims[0] {
                            acc += w12 * bases[0][(c0, g0)] * t[base + c0];
                        }
                    }
                }
                out[g0 + s[0] * (g1 + s[1] * g2)] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random(lens: &[usize], q: usize, seed: u64) -> SeparatedField {
        let mut s = seed;
        let bx = IndexBox::new(vec![0; lens.len()], lens.iter().map(|n| n - 1).collect());
        let factors = lens
            .iter()
            .map(|&n| (0..q).map(|_| (0..n).map(|_| lcg(&mut s)).collect()).collect())
            .collect();
        SeparatedField::new(1, 0.1, bx, factors).unwrap()
    }

    fn dense_norm(v: &[f64]) -> f64 {
        norm(v)
    }

    #[test]
    fn nodal_examples() {
        let bx = IndexBox::cube(2, 0, 1);
        let f = SeparatedField::new(1, 1.0, bx.clone(), vec![vec![vec![1.0, 2.0]], vec![vec![3.0, 4.0]]]).unwrap();
        assert_eq!(f.evaluate_nodal(&[1, 1]).unwrap(), 8.0);
        assert_eq!(SeparatedField::zeros(1, 1.0, bx).evaluate_nodal(&[0, 1]).unwrap(), 0.0);
        assert!(f.evaluate_nodal(&[2, 0]).is_err());
    }

    #[test]
    fn nodal_matches_outer_products() {
        let f = random(&[5, 5], 2, 3);
        let dense = f.to_dense();
        for i in 0..5 {
            for j in 0..5 {
                let brute: f64 = (0..2).map(|q| f.factor(0, q)[i] * f.factor(1, q)[j]).sum();
                assert!((dense[i * 5 + j] - brute).abs() < 1e-15);
                assert!((f.evaluate_nodal(&[i, j]).unwrap() - brute).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn point_evaluation_is_bilinear_interpolation() {
        let f = random(&[6, 7], 3, 11);
        let dense = f.to_dense();
        let mut s = 5u64;
        for _ in 0..20 {
            let x = (lcg(&mut s) * 0.5 + 0.5) * 0.5;
            let y = (lcg(&mut s) * 0.5 + 0.5) * 0.6;
            let (sx, sy) = (x / 0.1, y / 0.1);
            let (i, j) = ((sx.floor() as usize).min(4), (sy.floor() as usize).min(5));
            let (a, b) = (sx - i as f64, sy - j as f64);
            let at = |i: usize, j: usize| dense[i * 7 + j];
            let want = at(i, j) * (1.0 - a) * (1.0 - b)
                + at(i + 1, j) * a * (1.0 - b)
                + at(i, j + 1) * (1.0 - a) * b
                + at(i + 1, j + 1) * a * b;
            assert!((f.evaluate_point(&[x, y]).unwrap() - want).abs() < 1e-12);
        }
        assert_eq!(f.evaluate_point(&[0.3, 0.2]).unwrap(), f.evaluate_nodal(&[3, 2]).unwrap());
        assert!(f.evaluate_point(&[0.51, 0.2]).is_err());
    }

    #[test]
    fn add_and_cancel() {
        let a = random(&[6, 6], 2, 1);
        let b = random(&[6, 6], 3, 2);
        let c = a.add(&b).unwrap();
        assert_eq!(c.rank(), 5);
        for (x, (y, z)) in c.to_dense().iter().zip(a.to_dense().iter().zip(b.to_dense())) {
            assert!((x - y - z).abs() < 1e-14);
        }
        let zero = a.sub(&a).unwrap();
        assert!(zero.frobenius_norm() < 1e-10 * a.frobenius_norm());
        let other = SeparatedField::zeros(1, 0.1, IndexBox::cube(2, 0, 4));
        assert!(matches!(a.add(&other), Err(FieldError::ShapeMismatch(_))));
    }

    #[test]
    fn masking() {
        let f = random(&[8, 8], 2, 9);
        let m = f.mask(&[2..6, 1..4]).unwrap();
        let (d, dm) = (f.to_dense(), m.to_dense());
        for i in 0..8 {
            for j in 0..8 {
                let inside = (2..6).contains(&i) && (1..4).contains(&j);
                assert_eq!(dm[i * 8 + j], if inside { d[i * 8 + j] } else { 0.0 });
            }
        }
        assert_eq!(f.mask(&[0..8, 0..8]).unwrap(), f);
        assert_eq!(f.mask(&[0..0, 0..8]).unwrap().rank(), 0);
        assert!(matches!(
            f.mask_indices(&[vec![1, 3], vec![0]]),
            Err(FieldError::BoxNotRectangular { axis: 0 })
        ));
    }

    #[test]
    fn norms() {
        let bx = IndexBox::cube(2, 0, 1);
        let f = SeparatedField::new(1, 1.0, bx, vec![vec![vec![3.0, 4.0]], vec![vec![1.0, 0.0]]]).unwrap();
        assert!((f.frobenius_norm() - 5.0).abs() < 1e-14);
        let r = random(&[7, 7], 3, 4);
        assert!((r.frobenius_norm() - dense_norm(&r.to_dense())).abs() < 1e-12);
        let r3 = random(&[5, 4, 6], 3, 8);
        assert!((r3.frobenius_norm() - dense_norm(&r3.to_dense())).abs() < 1e-12);
        assert!((r3.gram_norm() - dense_norm(&r3.to_dense())).abs() < 1e-12);
    }

    #[test]
    fn compress_matches_dense_svd_tail() {
        let f = random(&[10, 10], 6, 21);
        let c = f.compress(Compression::rank(3));
        assert_eq!(c.rank(), 3);
        let dense = DMatrix::from_row_slice(10, 10, &f.to_dense());
        let mut s: Vec<f64> = dense.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let tail = (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]).sqrt();
        let err = c.sub(&f).unwrap().frobenius_norm();
        assert!((err - tail).abs() < 1e-10);
    }

    #[test]
    fn compress_merges_duplicate_modes() {
        let f = random(&[9, 9], 1, 2);
        let g = f.add(&f).unwrap().compress(Compression::tol(1e-10));
        assert_eq!(g.rank(), 1);
        assert!(g.sub(&f.scale(2.0)).unwrap().frobenius_norm() < 1e-12 * g.frobenius_norm());
        let c = f.compress(Compression::rank(1));
        assert_eq!(c, f);
    }

    #[test]
    fn compress_3d_reduces_and_preserves() {
        let base = random(&[6, 5, 7], 2, 5);
        let f = base.add(&base.scale(0.5)).unwrap().add(&random(&[6, 5, 7], 1, 6)).unwrap();
        let c = f.compress(Compression::tol(1e-10));
        assert!(c.rank() < f.rank(), "rank {}", c.rank());
        let err = c.sub(&f).unwrap().frobenius_norm();
        assert!(err < 1e-9 * f.frobenius_norm());
        let twice = base.add(&base).unwrap().compress(Compression::tol(1e-10));
        assert_eq!(twice.rank(), 2);
        let one = random(&[6, 5, 7], 1, 3);
        assert_eq!(one.add(&one.scale(3.0)).unwrap().compress(Compression::tol(1e-10)).rank(), 1);
        let zero = f.sub(&f).unwrap().compress(Compression::tol(1e-10));
        assert_eq!(zero.rank(), 0);
    }

    #[test]
    fn merge_only_skips_tucker_in_3d() {
        let a = random(&[6, 5, 7], 3, 11);
        let b = random(&[6, 5, 7], 3, 12);
        // the copy of `a` folds into `a`; nothing else is touched
        let f = a.add(&b).unwrap().add(&a.scale(2.0)).unwrap();
        let m = f.compress(Compression::merge_only(1e-10));
        assert_eq!(m.rank(), 6);
        let err = m.sub(&f).unwrap().frobenius_norm();
        assert!(err < 1e-12 * f.frobenius_norm());
        assert_eq!(f.sub(&f).unwrap().compress(Compression::merge_only(1e-10)).rank(), 0);
        let g = random(&[6, 5], 4, 13);
        assert_eq!(g.compress(Compression::merge_only(1e-10)), g.compress(Compression::tol(1e-10)));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let f = random(&[4, 5, 3], 2, 17);
        let g = SeparatedField::from_text(&f.to_text()).unwrap();
        assert_eq!(f, g);
        let z = SeparatedField::zeros(2, 0.25, IndexBox::new(vec![3, 4], vec![5, 9]));
        assert_eq!(SeparatedField::from_text(&z.to_text()).unwrap(), z);
        assert!(SeparatedField::from_text("dim 2").is_err());
    }

    #[test]
    fn restrict_copies_overlap() {
        let f = SeparatedField::new(
            2,
            0.5,
            IndexBox::new(vec![2, 2], vec![5, 5]),
            vec![vec![vec![1.0, 2.0, 3.0, 4.0]], vec![vec![1.0, 1.0, 1.0, 1.0]]],
        )
        .unwrap();
        let g = f.restrict_to(&IndexBox::new(vec![4, 0], vec![7, 3]));
        assert_eq!(g.factor(0, 0), &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(g.factor(1, 0), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(f.restrict_to(&IndexBox::new(vec![6, 6], vec![8, 8])).rank(), 0);
    }

    #[test]
    fn compress_of_shell_stack_is_exact() {
        // boundary/interior split of two interpolated modes: a stack whose
        // small core mixes O(1) entries with underflowing ones
        let x0 = [0.0, 0.06439854266826785, 0.4830346299445719, -0.032133651796292524, -0.09148626645174257, -0.037130897449201776, -0.013654287979378878];
        let x1 = [0.0, -0.19782943833096234, -0.8379315504576966, -0.07357043981903474, 0.06575558638169793, 0.021971796296300687, 0.0072807861586586696];
        let y0 = [0.18025260022298262, 0.49233961138191384, 1.0778818406605228, 1.3912674639294669, -0.35233481335234884, -0.06642224372757134, 0.0];
        let y1 = [0.12241744436975831, 0.3396709787294227, 0.8043334743985627, 0.7443880623786111, -2.298093796133372, -0.7589553934211837, 0.0];
        let edge = |v: &[f64]| {
            let mut w = vec![0.0; v.len()];
            w[0] = v[0];
            w[v.len() - 1] = v[v.len() - 1];
            w
        };
        let inner = |v: &[f64]| {
            let mut w = v.to_vec();
            w[0] = 0.0;
            w[v.len() - 1] = 0.0;
            w
        };
        let mut f = SeparatedField::zeros(2, 1.0 / 8.0, IndexBox::new(vec![0, 2], vec![6, 8]));
        for (x, y) in [(&x0, &y0), (&x1, &y1)] {
            f.push_mode(vec![edge(x), inner(y)]);
            f.push_mode(vec![inner(x), edge(y)]);
            f.push_mode(vec![edge(x), edge(y)]);
        }
        let c = f.compress(Compression::default());
        let (a, b) = (f.to_dense(), c.to_dense());
        let diff = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff < 1e-14, "{diff}");
        assert!(b[..7].iter().all(|v| v.abs() < 1e-15));
    }
}

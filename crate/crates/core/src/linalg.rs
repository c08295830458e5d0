//! Small linear-algebra kernels shared by the assembly and solver modules.
//!
//! One-dimensional finite element matrices between hat-function bases have a
//! contiguous column span per row, so they are stored row by row as
//! `(first column, values)` pairs. Direction systems of the alternating solver
//! are banded once unknowns are interleaved node-major, and are factored with a
//! banded LU with partial pivoting.

use nalgebra::{DMatrix, Dyn, SVD};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("singular system: pivot {pivot:e} at row {row} below threshold {threshold:e}")]
    Singular {
        row: usize,
        pivot: f64,
        threshold: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Full SVD (both singular bases). Entries below the roundoff level of the
/// largest one are cleared first: the bidiagonal iteration can stop early on
/// matrices that mix O(1) entries with underflowing ones. The factorization is
/// checked and retried on the transpose if it does not reproduce `m`.
pub fn svd(mut m: DMatrix<f64>) -> SVD<f64, Dyn, Dyn> {
    let floor = m.amax() * f64::EPSILON * 1e-2;
    m.iter_mut().filter(|x| x.abs() < floor).for_each(|x| *x = 0.0);
    let direct = m.clone().svd(true, true);
    let scale = m.norm().max(f64::MIN_POSITIVE);
    if svd_residual(&direct, &m) <= 1e-12 * scale {
        return direct;
    }
    let t = m.transpose().svd(true, true);
    if svd_residual(&t, &m.transpose()) < svd_residual(&direct, &m) {
        SVD {
            u: t.v_t.map(|v| v.transpose()),
            v_t: t.u.map(|u| u.transpose()),
            singular_values: t.singular_values,
        }
    } else {
        direct
    }
}

fn svd_residual(svd: &SVD<f64, Dyn, Dyn>, m: &DMatrix<f64>) -> f64 {
    match (&svd.u, &svd.v_t) {
        (Some(u), Some(vt)) => (u * DMatrix::from_diagonal(&svd.singular_values) * vt - m).norm(),
        _ => f64::INFINITY,
    }
}

/// Sparse matrix whose nonzeros in each row occupy one contiguous column range.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSpanMatrix {
    nrows: usize,
    ncols: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl RowSpanMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: vec![(0, Vec::new()); nrows],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            rows: (0..n).map(|i| (i, vec![1.0])).collect(),
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut span = vec![(usize::MAX, 0usize); nrows];
        for &(r, c, _) in triplets {
            let s = &mut span[r];
            s.0 = s.0.min(c);
            s.1 = s.1.max(c);
        }
        let mut rows: Vec<(usize, Vec<f64>)> = span
            .iter()
            .map(|&(lo, hi)| {
                if lo == usize::MAX {
                    (0, Vec::new())
                } else {
                    (lo, vec![0.0; hi - lo + 1])
                }
            })
            .collect();
        for &(r, c, v) in triplets {
            let (lo, vals) = &mut rows[r];
            vals[c - *lo] += v;
        }
        Self { nrows, ncols, rows }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut trip = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    trip.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> (usize, &[f64]) {
        let (lo, v) = &self.rows[i];
        (*lo, v)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, v) = &self.rows[i];
        if j < *lo || j >= lo + v.len() {
            0.0
        } else {
            v[j - lo]
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            rows: self
                .rows
                .iter()
                .map(|(lo, v)| (*lo, v.iter().map(|x| x * s).collect()))
                .collect(),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "matvec length mismatch");
        self.rows
            .iter()
            .map(|(lo, v)| v.iter().zip(&x[*lo..lo + v.len()]).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Bilinear form `yᵀ A x`.
    pub fn bilinear(&self, y: &[f64], x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(y)
            .filter(|(_, yi)| **yi != 0.0)
            .map(|((lo, v), yi)| {
                yi * v
                    .iter()
                    .zip(&x[*lo..lo + v.len()])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Largest `|i - j|` over stored entries (square matrices only).
    pub fn half_bandwidth(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, (_, v))| !v.is_empty())
            .map(|(i, (lo, v))| {
                let hi = lo + v.len() - 1;
                i.abs_diff(*lo).max(i.abs_diff(hi))
            })
            .max()
            .unwrap_or(0)
    }

    /// Sub-block `A[rows, cols]` for half-open index ranges.
    pub fn restrict(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let out_rows = rows
            .clone()
            .map(|i| {
                let (lo, v) = &self.rows[i];
                let a = (*lo).max(cols.start);
                let b = (lo + v.len()).min(cols.end);
                if a >= b {
                    (0, Vec::new())
                } else {
                    (a - cols.start, v[a - lo..b - lo].to_vec())
                }
            })
            .collect();
        Self {
            nrows: rows.len(),
            ncols: cols.len(),
            rows: out_rows,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, (lo, v)) in self.rows.iter().enumerate() {
            for (k, x) in v.iter().enumerate() {
                m[(i, lo + k)] = *x;
            }
        }
        m
    }
}

/// Square banded matrix with `kl` sub- and `ku` super-diagonals, with room for
/// the fill produced by row interchanges.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(c + self.kl >= r && c + self.kl - r < self.width);
        r * self.width + (c + self.kl - r)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if c + self.kl < r || c > r + self.ku {
            0.0
        } else {
            self.data[self.idx(r, c)]
        }
    }

    /// Adds to an entry inside the declared band.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        assert!(
            c + self.kl >= r && c <= r + self.ku,
            "entry ({r},{c}) outside band"
        );
        let i = self.idx(r, c);
        self.data[i] += v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn mean_abs_diagonal(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (0..self.n).map(|i| self.get(i, i).abs()).sum::<f64>() / self.n as f64
    }

    pub fn add_to_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            let k = self.idx(i, i);
            self.data[k] += v;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let lo = r.saturating_sub(self.kl);
                let hi = (r + self.ku).min(self.n - 1);
                (lo..=hi).map(|c| self.get(r, c) * x[c]).sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |r, c| self.get(r, c))
    }

    /// In-place LU factorization with partial pivoting. A pivot whose magnitude
    /// is at most `rel_threshold · max|A|` is reported as singular.
    pub fn factor(mut self, rel_threshold: f64) -> Result<BandLu, LinalgError> {
        let n = self.n;
        let kl = self.kl;
        let reach = kl + self.ku;
        let threshold = rel_threshold * self.max_abs();
        let mut piv = vec![0usize; n];
        for c in 0..n {
            let last = (c + kl).min(n - 1);
            let mut p = c;
            let mut best = self.data[self.idx(c, c)].abs();
            for r in c + 1..=last {
                let v = self.data[self.idx(r, c)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best <= threshold || best == 0.0 {
                return Err(LinalgError::Singular {
                    row: c,
                    pivot: best,
                    threshold,
                });
            }
            piv[c] = p;
            let cmax = (c + reach).min(n - 1);
            if p != c {
                for j in c..=cmax {
                    let a = self.idx(c, j);
                    let b = self.idx(p, j);
                    self.data.swap(a, b);
                }
            }
            let d = self.data[self.idx(c, c)];
            for r in c + 1..=last {
                let irc = self.idx(r, c);
                let l = self.data[irc] / d;
                self.data[irc] = l;
                if l != 0.0 {
                    for j in c + 1..=cmax {
                        let src = self.data[self.idx(c, j)];
                        let dst = self.idx(r, j);
                        self.data[dst] -= l * src;
                    }
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.m.n;
        if b.len() != n {
            return Err(LinalgError::Dimension {
                expected: n,
                got: b.len(),
            });
        }
        let kl = self.m.kl;
        let reach = kl + self.m.ku;
        let mut x = b.to_vec();
        for c in 0..n {
            let p = self.piv[c];
            if p != c {
                x.swap(c, p);
            }
            let xc = x[c];
            if xc != 0.0 {
                for r in c + 1..=(c + kl).min(n - 1) {
                    x[r] -= self.m.data[self.m.idx(r, c)] * xc;
                }
            }
        }
        for c in (0..n).rev() {
            let mut s = x[c];
            for j in c + 1..=(c + reach).min(n - 1) {
                s -= self.m.data[self.m.idx(c, j)] * x[j];
            }
            x[c] = s / self.m.data[self.m.idx(c, c)];
        }
        Ok(x)
    }
}

/// Dense LU with partial pivoting; same singularity rule as the banded path.
pub fn dense_solve(a: DMatrix<f64>, b: &[f64], rel_threshold: f64) -> Result<Vec<f64>, LinalgError> {
    let n = a.nrows();
    if b.len() != n {
        return Err(LinalgError::Dimension {
            expected: n,
            got: b.len(),
        });
    }
    let max = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let threshold = rel_threshold * max;
    let lu = a.lu();
    let u = lu.u();
    for i in 0..n {
        let p = u[(i, i)].abs();
        if p <= threshold || p == 0.0 {
            return Err(LinalgError::Singular {
                row: i,
                pivot: p,
                threshold,
            });
        }
    }
    let rhs = nalgebra::DVector::from_column_slice(b);
    lu.solve(&rhs)
        .map(|v| v.as_slice().to_vec())
        .ok_or(LinalgError::Singular {
            row: 0,
            pivot: 0.0,
            threshold,
        })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(points: usize) -> (Vec<f64>, Vec<f64>) {
    match points {
        1 => (vec![0.0], vec![2.0]),
        2 => {
            let a = 1.0 / 3f64.sqrt();
            (vec![-a, a], vec![1.0, 1.0])
        }
        3 => {
            let a = (3.0f64 / 5.0).sqrt();
            (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
        _ => golub_welsch(points),
    }
}

// Nodes are eigenvalues of the Jacobi matrix of the Legendre recurrence;
// weights are 2·(first eigenvector component)².
fn golub_welsch(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], 2.0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

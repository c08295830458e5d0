//! Nested uniform tensor-product grids and the moving fine-scale window.
//!
//! Every level ℓ lives on a global lattice covering Ω = [0, L₁]^d with mesh size
//! h_ℓ; node `i` of that lattice sits at `origin + i·h_ℓ`. A window on level ℓ is
//! an [`IndexBox`] of that lattice, so windows at different time steps differ by
//! integer shifts and all index arithmetic stays exact.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("level {level}: coarsening ratio h{parent}/h{level} = {ratio} is not a positive integer")]
    NonIntegerCoarseningRatio { level: usize, parent: usize, ratio: f64 },
    #[error("level {level}: window length {length} exceeds parent length {parent_length}")]
    WindowLargerThanParent {
        level: usize,
        length: f64,
        parent_length: f64,
    },
    #[error("level {level}: window of {cells} cells is not a whole number of parent cells (ratio {ratio})")]
    MisalignedWindow { level: usize, cells: usize, ratio: usize },
    #[error("invalid hierarchy: {0}")]
    Invalid(String),
    #[error("node index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },
}

/// Per-level input of [`build_hierarchy`]: cells per dimension and side length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSpec {
    pub cells: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    pub level: usize,
    pub dim: usize,
    /// N_ℓ: cells per dimension of this level's box (whole domain for level 1,
    /// the window otherwise).
    pub cells: usize,
    pub mesh_size: f64,
    pub side_length: f64,
    pub origin: Vec<f64>,
    /// h_{ℓ-1}/h_ℓ; 1 for the coarsest level.
    pub ratio: usize,
    /// Cells per dimension of this level's lattice over the whole domain.
    pub lattice_cells: usize,
}

impl LevelGrid {
    pub fn nodes_per_dim(&self) -> usize {
        self.cells + 1
    }

    pub fn coordinate(&self, axis: usize, index: usize) -> f64 {
        self.origin[axis] + index as f64 * self.mesh_size
    }

    /// The box of the whole domain on this level's lattice.
    pub fn domain_box(&self) -> IndexBox {
        IndexBox::cube(self.dim, 0, self.lattice_cells)
    }

    /// Window extent measured in parent cells.
    pub fn extent_in_parent_cells(&self) -> usize {
        self.cells / self.ratio
    }
}

/// Validates a per-level `{N_ℓ, L_ℓ}` list and returns the nested grids.
pub fn build_hierarchy(specs: &[LevelSpec], dim: usize) -> Result<Vec<LevelGrid>, GridError> {
    if specs.is_empty() {
        return Err(GridError::Invalid("no levels given".into()));
    }
    if !(1..=3).contains(&dim) {
        return Err(GridError::Invalid(format!("dimension {dim} not supported")));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.cells == 0 || !(s.length > 0.0) || !s.length.is_finite() {
            return Err(GridError::Invalid(format!(
                "level {} needs cells > 0 and a positive length",
                i + 1
            )));
        }
    }
    let domain = specs[0].length;
    let mut grids: Vec<LevelGrid> = Vec::with_capacity(specs.len());
    grids.push(LevelGrid {
        level: 1,
        dim,
        cells: specs[0].cells,
        mesh_size: domain / specs[0].cells as f64,
        side_length: domain,
        origin: vec![0.0; dim],
        ratio: 1,
        lattice_cells: specs[0].cells,
    });
    for (i, s) in specs.iter().enumerate().skip(1) {
        let level = i + 1;
        let parent = &grids[i - 1];
        let parent_length = specs[i - 1].length;
        if s.length > parent_length * (1.0 + 1e-12) {
            return Err(GridError::WindowLargerThanParent {
                level,
                length: s.length,
                parent_length,
            });
        }
        let h = s.length / s.cells as f64;
        let ratio = parent.mesh_size / h;
        let rounded = ratio.round();
        if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * rounded {
            return Err(GridError::NonIntegerCoarseningRatio {
                level,
                parent: level - 1,
                ratio,
            });
        }
        let ratio = rounded as usize;
        if s.cells % ratio != 0 {
            return Err(GridError::MisalignedWindow {
                level,
                cells: s.cells,
                ratio,
            });
        }
        let lattice_cells = parent.lattice_cells * ratio;
        let mesh_size = domain / lattice_cells as f64;
        grids.push(LevelGrid {
            level,
            dim,
            cells: s.cells,
            mesh_size,
            side_length: s.cells as f64 * mesh_size,
            origin: vec![0.0; dim],
            ratio,
            lattice_cells,
        });
    }
    Ok(grids)
}

/// Number of parent cells of a window of physical length `length` centred on
/// a parent node: the half-width is rounded up to whole parent cells.
pub fn symmetric_window_cells(length: f64, parent_mesh_size: f64) -> usize {
    let half = 0.5 * length / parent_mesh_size;
    let cells = (half - 1e-9).ceil().max(1.0) as usize;
    2 * cells
}

/// Axis-aligned box of lattice nodes, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexBox {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl IndexBox {
    pub fn new(lo: Vec<usize>, hi: Vec<usize>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b), "inverted box");
        Self { lo, hi }
    }

    pub fn cube(dim: usize, lo: usize, hi: usize) -> Self {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self, axis: usize) -> usize {
        self.hi[axis] - self.lo[axis] + 1
    }

    pub fn lens(&self) -> Vec<usize> {
        (0..self.dim()).map(|k| self.len(k)).collect()
    }

    pub fn node_count(&self) -> usize {
        self.lens().iter().product()
    }

    pub fn contains_box(&self, other: &IndexBox) -> bool {
        (0..self.dim()).all(|k| self.lo[k] <= other.lo[k] && other.hi[k] <= self.hi[k])
    }

    pub fn intersect(&self, other: &IndexBox) -> Option<IndexBox> {
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for k in 0..self.dim() {
            let a = self.lo[k].max(other.lo[k]);
            let b = self.hi[k].min(other.hi[k]);
            if a > b {
                return None;
            }
            lo.push(a);
            hi.push(b);
        }
        Some(IndexBox { lo, hi })
    }

    /// Multiplies indices by an integer ratio (parent lattice → child lattice).
    pub fn refined(&self, ratio: usize) -> IndexBox {
        IndexBox {
            lo: self.lo.iter().map(|x| x * ratio).collect(),
            hi: self.hi.iter().map(|x| x * ratio).collect(),
        }
    }

    /// Physical per-axis intervals for a lattice of mesh size `h`.
    pub fn region(&self, h: f64) -> Vec<(f64, f64)> {
        (0..self.dim())
            .map(|k| (self.lo[k] as f64 * h, self.hi[k] as f64 * h))
            .collect()
    }

    /// Tiles the nodes of `self` that are not nodes of `other` into disjoint
    /// boxes, peeling axes in `order`.
    pub fn node_difference(&self, other: &IndexBox, order: &[usize]) -> Vec<IndexBox> {
        if self.intersect(other).is_none() {
            return vec![self.clone()];
        }
        let mut rest = self.clone();
        let mut out = Vec::new();
        for &k in order {
            if rest.lo[k] < other.lo[k] {
                let mut b = rest.clone();
                b.hi[k] = other.lo[k] - 1;
                out.push(b);
                rest.lo[k] = other.lo[k];
            }
            if rest.hi[k] > other.hi[k] {
                let mut b = rest.clone();
                b.lo[k] = other.hi[k] + 1;
                out.push(b);
                rest.hi[k] = other.hi[k];
            }
        }
        out
    }

    /// Treats both boxes as closed physical regions (lattice corners) and tiles
    /// `self \ other` into boxes whose regions overlap only on faces.
    pub fn region_difference(&self, other: &IndexBox, order: &[usize]) -> Vec<IndexBox> {
        let Some(inter) = self.intersect(other) else {
            return vec![self.clone()];
        };
        let mut rest = self.clone();
        let mut out = Vec::new();
        for &k in order {
            if rest.lo[k] < inter.lo[k] {
                let mut b = rest.clone();
                b.hi[k] = inter.lo[k];
                out.push(b);
                rest.lo[k] = inter.lo[k];
            }
            if rest.hi[k] > inter.hi[k] {
                let mut b = rest.clone();
                b.lo[k] = inter.hi[k];
                out.push(b);
                rest.hi[k] = inter.hi[k];
            }
        }
        out.retain(|b| (0..b.dim()).all(|k| b.hi[k] > b.lo[k]));
        out
    }
}

/// Placement of a level-ℓ window inside its parent lattice at time step n.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubdomainPlacement {
    pub level: usize,
    /// Lower corner in the parent lattice.
    pub lower_corner_index: Vec<usize>,
    /// Window width in parent cells (same on every axis).
    pub extent_cells: usize,
    pub ratio: usize,
    pub time_step: usize,
}

impl SubdomainPlacement {
    /// The window's nodes on the parent lattice.
    pub fn parent_box(&self) -> IndexBox {
        IndexBox::new(
            self.lower_corner_index.clone(),
            self.lower_corner_index
                .iter()
                .map(|l| l + self.extent_cells)
                .collect(),
        )
    }

    /// The window's nodes on the child lattice.
    pub fn child_box(&self) -> IndexBox {
        self.parent_box().refined(self.ratio)
    }

    /// Integer shift (child cells) from `prev` to `self`.
    pub fn shift_from(&self, prev: &SubdomainPlacement) -> Vec<i64> {
        self.lower_corner_index
            .iter()
            .zip(&prev.lower_corner_index)
            .map(|(a, b)| (*a as i64 - *b as i64) * self.ratio as i64)
            .collect()
    }
}

/// Centres the child window on the parent node nearest to `source_center`
/// (ties broken half-to-even), then clamps it inside `parent_box`.
pub fn place_subdomain(
    parent: &LevelGrid,
    parent_box: &IndexBox,
    child: &LevelGrid,
    source_center: &[f64],
    time_step: usize,
) -> SubdomainPlacement {
    let extent = child.extent_in_parent_cells();
    let lower = (0..parent.dim)
        .map(|k| {
            let frac = (source_center[k] - parent.origin[k]) / parent.mesh_size;
            let center = frac.round_ties_even().max(0.0) as i64;
            let lo = center - (extent / 2) as i64;
            let min = parent_box.lo[k] as i64;
            let max = parent_box.hi[k] as i64 - extent as i64;
            lo.clamp(min, max.max(min)) as usize
        })
        .collect();
    SubdomainPlacement {
        level: child.level,
        lower_corner_index: lower,
        extent_cells: extent,
        ratio: child.ratio,
        time_step,
    }
}

/// Piecewise-linear hat of lattice node `index` evaluated at `x`.
pub fn hat_value(level: &LevelGrid, axis: usize, index: usize, x: f64) -> Result<f64, GridError> {
    if index > level.lattice_cells {
        return Err(GridError::IndexOutOfRange {
            index,
            max: level.lattice_cells,
        });
    }
    let xj = level.coordinate(axis, index);
    Ok((1.0 - (x - xj).abs() / level.mesh_size).max(0.0))
}

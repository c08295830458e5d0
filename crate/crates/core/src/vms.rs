//! Multi-level coupling and time marching.
//!
//! Level 1 carries the coarse field Ū on the whole domain; every finer level ℓ
//! carries its total field U_ℓ on a window Θ_ℓⁿ that follows the source. Within
//! a time step the levels are solved one after another (block Gauss–Seidel):
//! a level sees its child through the lagged coupling terms
//! `L^{ℓ,ℓ+1}U_{ℓ+1} − L^{ℓℓ}ℰ(U_{ℓ+1})` and its parent through the Dirichlet
//! lifting on the window boundary.

use std::time::Instant;

use thiserror::Error;

use crate::assembly::{
    assemble_load, build_operator, AssemblyError, OperatorFactorSum, SeparableSourceTerm, Space, Variant,
};
use crate::grid::{build_hierarchy, place_subdomain, GridError, IndexBox, LevelGrid, LevelSpec, SubdomainPlacement};
use crate::problems::Problem;
use crate::separated::{Compression, FieldError, SeparatedField};
use crate::td_solver::{apply_operator, solve_separated, LinearSolver, SolveCriteria, SolveStats, SolverError};
use crate::verify::{step_error, StepError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VmsError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("window not aligned with its parent: {0}")]
    MisalignedWindow(String),
    #[error("invalid run setup: {0}")]
    Setup(String),
}

/// Everything `march` needs besides the problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MarchConfig {
    pub dim: usize,
    /// Level 1 first; `cells` of later levels are window sizes in own cells.
    pub levels: Vec<LevelSpec>,
    /// Rank Q_ℓ of the unknown per level.
    pub modes: Vec<usize>,
    /// N_t.
    pub steps: usize,
    pub criteria: SolveCriteria,
    /// Three levels only: one loop over all levels instead of nested loops.
    pub accelerated: bool,
    /// Start the inter-scale iteration from the transferred previous fine
    /// fields instead of zero.
    pub warm_start: bool,
    pub solver: LinearSolver,
    pub compression_tol: f64,
    pub load_points: usize,
    pub error_points: usize,
    pub compute_errors: bool,
}

impl MarchConfig {
    pub fn new(dim: usize, levels: Vec<LevelSpec>, modes: Vec<usize>, steps: usize) -> Self {
        Self {
            dim,
            levels,
            modes,
            steps,
            criteria: SolveCriteria::default(),
            accelerated: false,
            warm_start: true,
            solver: LinearSolver::default(),
            compression_tol: Compression::DEFAULT_TOL,
            load_points: 2,
            error_points: 3,
            compute_errors: true,
        }
    }

    pub fn validate(&self, problem: &dyn Problem) -> Result<Vec<LevelGrid>, VmsError> {
        if self.levels.is_empty() || self.levels.len() > 3 {
            return Err(VmsError::Setup(format!(
                "{} levels requested, 1 to 3 supported",
                self.levels.len()
            )));
        }
        if self.modes.len() != self.levels.len() || self.modes.contains(&0) {
            return Err(VmsError::Setup("need one positive rank per level".into()));
        }
        if self.steps == 0 {
            return Err(VmsError::Setup("at least one time step is needed".into()));
        }
        if problem.dim() != self.dim {
            return Err(VmsError::Setup(format!(
                "problem is {}-dimensional, run is {}-dimensional",
                problem.dim(),
                self.dim
            )));
        }
        if (self.levels[0].length - problem.domain_length()).abs() > 1e-12 * problem.domain_length() {
            return Err(VmsError::Setup("level 1 must cover the problem domain".into()));
        }
        if !(self.compression_tol >= 0.0) || self.load_points == 0 || self.error_points == 0 {
            return Err(VmsError::Setup("bad tolerance or quadrature order".into()));
        }
        Ok(build_hierarchy(&self.levels, self.dim)?)
    }
}

/// The fields of all levels after time step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelState {
    pub step: usize,
    pub time: f64,
    /// Index 0 is Ū on the domain; index ℓ−1 is U_ℓ on its window.
    pub fields: Vec<SeparatedField>,
    /// `None` for level 1.
    pub placements: Vec<Option<SubdomainPlacement>>,
}

impl LevelState {
    pub fn levels(&self) -> usize {
        self.fields.len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.rank()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub seconds: f64,
    /// Outer inter-scale iterations θ.
    pub scale_iterations: usize,
    /// Inner (level 2–3) iterations summed over the outer loop.
    pub inner_iterations: usize,
    pub scale_converged: bool,
    /// Sweep rounds ρ summed per level.
    pub sweeps: Vec<usize>,
    /// Separated solves that hit ρ_max.
    pub td_unconverged: usize,
    pub ranks: Vec<usize>,
    pub error: Option<StepError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub grids: Vec<LevelGrid>,
    pub steps: Vec<StepRecord>,
    pub final_state: LevelState,
}

impl RunReport {
    /// Relative error: mean of per-step error norms over mean of exact norms.
    pub fn relative_error(&self) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for s in &self.steps {
            let e = s.error.as_ref()?;
            num += e.error_norm;
            den += e.exact_norm;
        }
        (den > 0.0).then(|| num / den).or((num == 0.0).then_some(0.0))
    }

    pub fn all_converged(&self) -> bool {
        self.steps
            .iter()
            .all(|s| s.scale_converged && s.td_unconverged == 0)
    }

    /// Mean wall-clock seconds per step, skipping the first `warmup` steps.
    pub fn mean_step_seconds(&self, warmup: usize) -> f64 {
        let tail = if self.steps.len() > warmup {
            &self.steps[warmup..]
        } else {
            &self.steps[..]
        };
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|s| s.seconds).sum::<f64>() / tail.len() as f64
    }
}

/// ℐ along one axis: hat interpolation of parent values `f` (parent nodes
/// `parent_lo..`) at child nodes `child_lo..child_lo + len`.
fn interpolate_axis(
    f: &[f64],
    parent_lo: usize,
    child_lo: usize,
    len: usize,
    ratio: usize,
) -> Result<Vec<f64>, VmsError> {
    let mut out = Vec::with_capacity(len);
    for g in child_lo..child_lo + len {
        let (j, r) = (g / ratio, g % ratio);
        let needed = if r == 0 { j } else { j + 1 };
        if j < parent_lo || needed - parent_lo >= f.len() {
            return Err(VmsError::MisalignedWindow(format!(
                "child node {g} (ratio {ratio}) outside parent nodes {parent_lo}..{}",
                parent_lo + f.len()
            )));
        }
        let a = f[j - parent_lo];
        out.push(if r == 0 {
            a
        } else {
            let w = r as f64 / ratio as f64;
            a * (1.0 - w) + f[j + 1 - parent_lo] * w
        });
    }
    Ok(out)
}

/// ℐ: the parent field interpolated onto `child_box` of the child lattice.
pub fn interpolate(
    parent: &SeparatedField,
    child_box: &IndexBox,
    ratio: usize,
    child_level: usize,
    child_mesh_size: f64,
) -> Result<SeparatedField, VmsError> {
    let pb = parent.index_box();
    let factors = (0..parent.dim())
        .map(|k| {
            parent
                .axis_factors(k)
                .iter()
                .map(|v| interpolate_axis(v, pb.lo[k], child_box.lo[k], child_box.len(k), ratio))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SeparatedField::new(child_level, child_mesh_size, child_box.clone(), factors)?)
}

/// Dirichlet data of a child window: equals ℐ(parent) on every boundary node
/// of the window and zero inside. Each parent mode yields one mode per
/// nonempty set S of axes, boundary-masked on S and interior-masked elsewhere.
pub fn interface_lifting(
    parent: &SeparatedField,
    placement: &SubdomainPlacement,
    child: &LevelGrid,
    tol: f64,
) -> Result<SeparatedField, VmsError> {
    let child_box = placement.child_box();
    let interp = interpolate(parent, &child_box, placement.ratio, child.level, child.mesh_size)?;
    let d = interp.dim();
    let mut out = SeparatedField::zeros(child.level, child.mesh_size, child_box);
    let boundary = |v: &[f64]| {
        let mut w = vec![0.0; v.len()];
        w[0] = v[0];
        w[v.len() - 1] = v[v.len() - 1];
        w
    };
    let interior = |v: &[f64]| {
        let mut w = v.to_vec();
        w[0] = 0.0;
        let n = w.len();
        w[n - 1] = 0.0;
        w
    };
    for q in 0..interp.rank() {
        for s in 1..(1usize << d) {
            let mode: Vec<Vec<f64>> = (0..d)
                .map(|k| {
                    let v = interp.factor(k, q);
                    if s & (1 << k) != 0 {
                        boundary(v)
                    } else {
                        interior(v)
                    }
                })
                .collect();
            if mode.iter().all(|v| v.iter().any(|&x| x != 0.0)) {
                out.push_mode(mode);
            }
        }
    }
    Ok(out.compress(Compression::tol(tol)))
}

/// ℰ: nodal injection of a child field onto the parent nodes of its window.
pub fn average_e(
    child: &SeparatedField,
    placement: &SubdomainPlacement,
    parent_level: usize,
    parent_mesh_size: f64,
) -> Result<SeparatedField, VmsError> {
    let pbox = placement.parent_box();
    if child.index_box() != &placement.child_box() {
        return Err(VmsError::MisalignedWindow(format!(
            "child field on {:?}, window is {:?}",
            child.index_box(),
            placement.child_box()
        )));
    }
    let z = placement.ratio;
    let factors = (0..child.dim())
        .map(|k| {
            child
                .axis_factors(k)
                .iter()
                .map(|v| (0..pbox.len(k)).map(|j| v[j * z]).collect())
                .collect()
        })
        .collect();
    Ok(SeparatedField::new(parent_level, parent_mesh_size, pbox, factors)?)
}

/// Axis order in which the part of a new window not covered by the old one
/// is cut into boxes.
fn tiling_order(dim: usize) -> Vec<usize> {
    match dim {
        3 => vec![2, 1, 0],
        d => (0..d).collect(),
    }
}

/// Re-expresses the previous child field on the new window: copied where the
/// windows overlap, parent-interpolated on the newly covered boxes.
pub fn transfer_moving(
    prev: &SeparatedField,
    new_box: &IndexBox,
    parent_prev: &SeparatedField,
    ratio: usize,
    tol: f64,
) -> Result<SeparatedField, VmsError> {
    if prev.index_box() == new_box {
        return Ok(prev.clone());
    }
    let (level, h) = (prev.level(), prev.mesh_size());
    if prev.index_box().intersect(new_box).is_none() {
        return interpolate(parent_prev, new_box, ratio, level, h).map(|f| f.compress(Compression::tol(tol)));
    }
    let mut out = prev.restrict_to(new_box);
    for tile in new_box.node_difference(prev.index_box(), &tiling_order(prev.dim())) {
        let part = interpolate(parent_prev, &tile, ratio, level, h)?.restrict_to(new_box);
        out = out.add(&part)?;
    }
    Ok(out.compress(Compression::tol(tol)))
}

/// Nodal interpolant of a separable function on `bx`.
pub fn nodal_field(
    terms: &[SeparableSourceTerm],
    level: usize,
    mesh_size: f64,
    bx: &IndexBox,
    tol: f64,
) -> SeparatedField {
    let d = bx.dim();
    let mut out = SeparatedField::zeros(level, mesh_size, bx.clone());
    for t in terms {
        if t.weight == 0.0 {
            continue;
        }
        let mut mode: Vec<Vec<f64>> = (0..d)
            .map(|k| (bx.lo[k]..=bx.hi[k]).map(|i| (t.factors[k])(i as f64 * mesh_size)).collect())
            .collect();
        mode[0].iter_mut().for_each(|v| *v *= t.weight);
        if mode.iter().all(|v| v.iter().any(|&x| x != 0.0)) {
            out.push_mode(mode);
        }
    }
    out.compress(Compression::tol(tol))
}

/// Coupling of a level to its child window.
struct ChildCoupling {
    placement: SubdomainPlacement,
    /// Parent test functions against child trial functions over the window.
    cross: OperatorFactorSum,
    /// Parent test and trial functions over the window.
    same: OperatorFactorSum,
}

struct LevelEquation {
    level: usize,
    op: OperatorFactorSum,
    /// Load and all previous-time-level terms.
    rhs: SeparatedField,
    child: Option<ChildCoupling>,
}

/// `cross·U_child − same·ℰ(U_child)` on the parent nodes of the window.
fn coupling_product(
    c: &ChildCoupling,
    child: &SeparatedField,
    parent_level: usize,
    parent_mesh_size: f64,
) -> Result<SeparatedField, VmsError> {
    let p = apply_operator(&c.cross, child)?;
    let e = average_e(child, &c.placement, parent_level, parent_mesh_size)?;
    let s = apply_operator(&c.same, &e)?;
    Ok(p.sub(&s)?)
}

struct Marcher<'a> {
    problem: &'a dyn Problem,
    cfg: &'a MarchConfig,
    grids: Vec<LevelGrid>,
    dt: f64,
}

#[derive(Default)]
struct StepTally {
    scale_iterations: usize,
    inner_iterations: usize,
    scale_converged: bool,
    sweeps: Vec<usize>,
    td_unconverged: usize,
}

impl StepTally {
    fn new(levels: usize) -> Self {
        Self {
            sweeps: vec![0; levels],
            ..Default::default()
        }
    }

    fn add(&mut self, level: usize, s: &SolveStats) {
        self.sweeps[level] += s.iterations;
        if !s.converged {
            self.td_unconverged += 1;
        }
    }
}

/// `‖new − old‖ / ‖new‖`, `None` before the first comparison.
fn relative_change(new: &SeparatedField, old: Option<&SeparatedField>) -> Result<Option<f64>, VmsError> {
    let Some(old) = old else {
        return Ok(None);
    };
    let diff = new.sub(old)?.frobenius_norm();
    let norm = new.frobenius_norm();
    Ok(Some(if norm > 0.0 {
        diff / norm
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }))
}

impl<'a> Marcher<'a> {
    fn new(problem: &'a dyn Problem, cfg: &'a MarchConfig) -> Result<Self, VmsError> {
        let grids = cfg.validate(problem)?;
        let dt = problem.final_time() / cfg.steps as f64;
        Ok(Self {
            problem,
            cfg,
            grids,
            dt,
        })
    }

    fn levels(&self) -> usize {
        self.grids.len()
    }

    fn tol(&self) -> f64 {
        self.cfg.compression_tol
    }

    fn space(&self, i: usize, bx: IndexBox) -> Space {
        Space::new(i + 1, self.grids[i].mesh_size, bx)
    }

    fn place_windows(&self, t: f64, step: usize) -> Vec<Option<SubdomainPlacement>> {
        let center = self.problem.source_center(t);
        let mut out = vec![None];
        let mut parent_box = self.grids[0].domain_box();
        for i in 1..self.levels() {
            let p = place_subdomain(&self.grids[i - 1], &parent_box, &self.grids[i], &center, step);
            parent_box = p.child_box();
            out.push(Some(p));
        }
        out
    }

    fn level_box(&self, i: usize, placements: &[Option<SubdomainPlacement>]) -> IndexBox {
        match &placements[i] {
            None => self.grids[0].domain_box(),
            Some(p) => p.child_box(),
        }
    }

    fn initial_state(&self) -> LevelState {
        let placements = self.place_windows(0.0, 0);
        let terms = self.problem.initial_terms();
        let fields = (0..self.levels())
            .map(|i| {
                nodal_field(
                    &terms,
                    i + 1,
                    self.grids[i].mesh_size,
                    &self.level_box(i, &placements),
                    self.tol(),
                )
            })
            .collect();
        LevelState {
            step: 0,
            time: 0.0,
            fields,
            placements,
        }
    }

    fn coupling(
        &self,
        i: usize,
        placement: &SubdomainPlacement,
        dt: f64,
        variant: Variant,
    ) -> Result<ChildCoupling, VmsError> {
        let pbox = placement.parent_box();
        let region = pbox.region(self.grids[i].mesh_size);
        let ps = self.space(i, pbox);
        let cs = self.space(i + 1, placement.child_box());
        let nu = self.problem.nu();
        Ok(ChildCoupling {
            cross: build_operator(&ps, &cs, &region, dt, nu, variant)?,
            same: build_operator(&ps, &ps, &region, dt, nu, variant)?,
            placement: placement.clone(),
        })
    }

    /// Equation of level `i` on `bx` for a step of length `dt` ending at
    /// `t_end`. `prev_own` is the level's previous field already on `bx`;
    /// `prev_child` the child's previous field on its previous window.
    #[allow(clippy::too_many_arguments)]
    fn level_equation(
        &self,
        i: usize,
        bx: &IndexBox,
        prev_own: &SeparatedField,
        prev_child: Option<(&SeparatedField, &SubdomainPlacement)>,
        child_placement: Option<&SubdomainPlacement>,
        dt: f64,
        t_end: f64,
    ) -> Result<LevelEquation, VmsError> {
        let space = self.space(i, bx.clone());
        let region = space.region();
        let nu = self.problem.nu();
        let op = build_operator(&space, &space, &region, dt, nu, Variant::A)?;
        let op_hat = build_operator(&space, &space, &region, dt, nu, Variant::AHat)?;
        let t_mid = t_end - 0.5 * dt;
        let mut rhs = assemble_load(
            &self.problem.source_terms(t_mid),
            &space,
            self.cfg.load_points,
            self.tol(),
        );
        if prev_own.rank() > 0 {
            rhs = rhs.add(&apply_operator(&op_hat, prev_own)?)?;
        }
        if let Some((u, p)) = prev_child {
            if u.rank() > 0 {
                let c = self.coupling(i, p, dt, Variant::AHat)?;
                let term = coupling_product(&c, u, i + 1, self.grids[i].mesh_size)?;
                rhs = rhs.add(&term.restrict_to(bx))?;
            }
        }
        let rhs = rhs.compress(Compression::merge_only(self.tol()));
        let child = child_placement
            .map(|p| self.coupling(i, p, dt, Variant::A))
            .transpose()?;
        Ok(LevelEquation {
            level: i,
            op,
            rhs,
            child,
        })
    }

    fn solve_level(
        &self,
        eq: &LevelEquation,
        child: Option<&SeparatedField>,
        lifting: Option<&SeparatedField>,
    ) -> Result<(SeparatedField, SolveStats), VmsError> {
        let i = eq.level;
        let mut rhs = eq.rhs.clone();
        if let (Some(c), Some(u)) = (&eq.child, child) {
            if u.rank() > 0 {
                let term = coupling_product(c, u, i + 1, self.grids[i].mesh_size)?;
                rhs = rhs
                    .sub(&term.restrict_to(rhs.index_box()))?
                    .compress(Compression::merge_only(self.tol()));
            }
        }
        Ok(solve_separated(
            &eq.op,
            &rhs,
            self.cfg.modes[i],
            &self.cfg.criteria,
            lifting,
            self.cfg.solver,
        )?)
    }

    fn lifting(
        &self,
        i: usize,
        parent: &SeparatedField,
        placements: &[Option<SubdomainPlacement>],
    ) -> Result<SeparatedField, VmsError> {
        let p = placements[i].as_ref().expect("finer levels have windows");
        interface_lifting(parent, p, &self.grids[i], self.tol())
    }

    /// Advances `prev` by one step of length Δt.
    fn step(&self, prev: &LevelState) -> Result<(LevelState, StepTally), VmsError> {
        let n = prev.step + 1;
        let t = n as f64 * self.dt;
        let big_l = self.levels();
        let placements = self.place_windows(t, n);

        let mut transferred = vec![prev.fields[0].clone()];
        for i in 1..big_l {
            let p = placements[i].as_ref().expect("window");
            let moved = transfer_moving(
                &prev.fields[i],
                &p.child_box(),
                &transferred[i - 1],
                p.ratio,
                self.tol(),
            )?;
            transferred.push(moved);
        }
        let eqs = (0..big_l)
            .map(|i| {
                let bx = self.level_box(i, &placements);
                let prev_child = (i + 1 < big_l).then(|| {
                    (
                        &prev.fields[i + 1],
                        prev.placements[i + 1].as_ref().expect("window"),
                    )
                });
                let child_placement = placements.get(i + 1).and_then(|p| p.as_ref());
                self.level_equation(i, &bx, &transferred[i], prev_child, child_placement, self.dt, t)
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut tally = StepTally::new(big_l);
        let mut cur: Vec<SeparatedField> = (0..big_l)
            .map(|i| SeparatedField::zeros(i + 1, self.grids[i].mesh_size, self.level_box(i, &placements)))
            .collect();
        let crit = self.cfg.criteria;
        if self.cfg.warm_start {
            cur[1..].clone_from_slice(&transferred[1..]);
        }

        if big_l == 1 {
            let (u, s) = self.solve_level(&eqs[0], None, None)?;
            tally.add(0, &s);
            tally.scale_converged = true;
            cur[0] = u;
        } else if big_l == 2 || self.cfg.accelerated {
            let mut last: Option<SeparatedField> = None;
            for theta in 1..=crit.theta_max {
                for i in 0..big_l {
                    let lift = if i == 0 {
                        None
                    } else {
                        Some(self.lifting(i, &cur[i - 1], &placements)?)
                    };
                    let (u, s) = self.solve_level(&eqs[i], cur.get(i + 1), lift.as_ref())?;
                    tally.add(i, &s);
                    cur[i] = u;
                }
                tally.scale_iterations = theta;
                let change = relative_change(&cur[0], last.as_ref())?;
                last = Some(cur[0].clone());
                if change.is_some_and(|c| c < crit.scale_tol) {
                    tally.scale_converged = true;
                    break;
                }
            }
        } else {
            let mut last: Option<SeparatedField> = None;
            let mut inner_ok = true;
            for theta in 1..=crit.theta_max {
                let (u, s) = self.solve_level(&eqs[0], Some(&cur[1]), None)?;
                tally.add(0, &s);
                cur[0] = u;
                cur[2] = if self.cfg.warm_start {
                    transferred[2].clone()
                } else {
                    cur[2].zeroed()
                };
                let lift2 = self.lifting(1, &cur[0], &placements)?;
                let mut last2: Option<SeparatedField> = None;
                inner_ok = false;
                for _ in 1..=crit.theta_max {
                    let (u2, s2) = self.solve_level(&eqs[1], Some(&cur[2]), Some(&lift2))?;
                    tally.add(1, &s2);
                    cur[1] = u2;
                    let lift3 = self.lifting(2, &cur[1], &placements)?;
                    let (u3, s3) = self.solve_level(&eqs[2], None, Some(&lift3))?;
                    tally.add(2, &s3);
                    cur[2] = u3;
                    tally.inner_iterations += 1;
                    let change = relative_change(&cur[1], last2.as_ref())?;
                    last2 = Some(cur[1].clone());
                    if change.is_some_and(|c| c < crit.scale_tol) {
                        inner_ok = true;
                        break;
                    }
                }
                tally.scale_iterations = theta;
                let change = relative_change(&cur[0], last.as_ref())?;
                last = Some(cur[0].clone());
                if change.is_some_and(|c| c < crit.scale_tol) {
                    tally.scale_converged = true;
                    break;
                }
            }
            tally.scale_converged &= inner_ok;
        }
        Ok((
            LevelState {
                step: n,
                time: t,
                fields: cur,
                placements,
            },
            tally,
        ))
    }

    fn record(&self, state: &LevelState, tally: StepTally, seconds: f64) -> StepRecord {
        let error = self.cfg.compute_errors.then(|| {
            step_error(self.problem, state, self.cfg.error_points)
        });
        StepRecord {
            step: state.step,
            time: state.time,
            seconds,
            scale_iterations: tally.scale_iterations,
            inner_iterations: tally.inner_iterations,
            scale_converged: tally.scale_converged,
            sweeps: tally.sweeps,
            td_unconverged: tally.td_unconverged,
            ranks: state.ranks(),
            error: error.flatten(),
        }
    }

    fn run(&self, observer: &mut dyn FnMut(&LevelState)) -> Result<RunReport, VmsError> {
        let mut state = self.initial_state();
        observer(&state);
        let mut steps = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let start = Instant::now();
            let (next, tally) = self.step(&state)?;
            let seconds = start.elapsed().as_secs_f64();
            steps.push(self.record(&next, tally, seconds));
            state = next;
            observer(&state);
        }
        Ok(RunReport {
            grids: self.grids.clone(),
            steps,
            final_state: state,
        })
    }

    /// Coarse field at `t_b + s·(t_c − t_b)` from the quadratic through
    /// `s = −1, 0, 1`.
    fn quadratic(
        &self,
        a: &SeparatedField,
        b: &SeparatedField,
        c: &SeparatedField,
        s: f64,
    ) -> Result<SeparatedField, VmsError> {
        let wa = 0.5 * s * (s - 1.0);
        let wb = (1.0 - s) * (1.0 + s);
        let wc = 0.5 * s * (s + 1.0);
        let out = a.scale(wa).add(&b.scale(wb))?.add(&c.scale(wc))?;
        Ok(out.compress(Compression::tol(self.tol())))
    }

    fn run_slabs(&self, m: usize, observer: &mut dyn FnMut(&LevelState)) -> Result<RunReport, VmsError> {
        let mut state = self.initial_state();
        observer(&state);
        let mut steps = Vec::with_capacity(self.cfg.steps);
        for _ in 0..m {
            let start = Instant::now();
            let (next, tally) = self.step(&state)?;
            steps.push(self.record(&next, tally, start.elapsed().as_secs_f64()));
            state = next;
            observer(&state);
        }
        let mut slab_start_prev = self.initial_state().fields[0].clone();
        let crit = self.cfg.criteria;
        let slab_dt = m as f64 * self.dt;
        while state.step < self.cfg.steps {
            let start = Instant::now();
            let n0 = state.step;
            let t_end = (n0 + m) as f64 * self.dt;
            let coarse_start = state.fields[0].clone();
            let mut guess = coarse_start.clone();
            let mut tally = StepTally::new(2);
            let mut fine_states: Vec<LevelState> = Vec::new();
            for theta in 1..=crit.theta_max {
                fine_states.clear();
                let mut fine = state.fields[1].clone();
                let mut placement = state.placements[1].clone();
                let mut coarse_before = coarse_start.clone();
                for j in 1..=m {
                    let n = n0 + j;
                    let t = n as f64 * self.dt;
                    let placements = self.place_windows(t, n);
                    let p = placements[1].as_ref().expect("window");
                    let moved = transfer_moving(&fine, &p.child_box(), &coarse_before, p.ratio, self.tol())?;
                    let coarse_now = if j == m {
                        guess.clone()
                    } else {
                        self.quadratic(&slab_start_prev, &coarse_start, &guess, j as f64 / m as f64)?
                    };
                    let eq = self.level_equation(1, &p.child_box(), &moved, None, None, self.dt, t)?;
                    let lift = self.lifting(1, &coarse_now, &placements)?;
                    let (u, s) = self.solve_level(&eq, None, Some(&lift))?;
                    tally.add(1, &s);
                    fine = u;
                    placement = placements[1].clone();
                    fine_states.push(LevelState {
                        step: n,
                        time: t,
                        fields: vec![coarse_now.clone(), fine.clone()],
                        placements,
                    });
                    coarse_before = coarse_now;
                }
                let end_placements = vec![None, placement.clone()];
                let eq = self.level_equation(
                    0,
                    &self.grids[0].domain_box(),
                    &coarse_start,
                    Some((&state.fields[1], state.placements[1].as_ref().expect("window"))),
                    placement.as_ref(),
                    slab_dt,
                    t_end,
                )?;
                let (u, s) = self.solve_level(&eq, Some(&fine), None)?;
                tally.add(0, &s);
                tally.scale_iterations = theta;
                let change = relative_change(&u, Some(&guess))?.unwrap_or(0.0);
                guess = u;
                let last = fine_states.last_mut().expect("m ≥ 1");
                last.fields[0] = guess.clone();
                last.placements = end_placements;
                if change < crit.scale_tol {
                    tally.scale_converged = true;
                    break;
                }
            }
            let seconds = start.elapsed().as_secs_f64() / m as f64;
            for (j, fs) in fine_states.iter().enumerate() {
                let mut t = StepTally::new(2);
                if j + 1 == m {
                    t = std::mem::replace(&mut tally, StepTally::new(2));
                } else {
                    t.scale_iterations = tally.scale_iterations;
                    t.scale_converged = true;
                }
                steps.push(self.record(fs, t, seconds));
                observer(fs);
            }
            slab_start_prev = coarse_start;
            state = fine_states.pop().expect("m ≥ 1");
        }
        Ok(RunReport {
            grids: self.grids.clone(),
            steps,
            final_state: state,
        })
    }
}

/// Marches `problem` from t = 0 to its final time.
pub fn march(problem: &dyn Problem, cfg: &MarchConfig) -> Result<RunReport, VmsError> {
    march_observed(problem, cfg, &mut |_| {})
}

/// As [`march`], calling `observer` on the initial state and after every step.
pub fn march_observed(
    problem: &dyn Problem,
    cfg: &MarchConfig,
    observer: &mut dyn FnMut(&LevelState),
) -> Result<RunReport, VmsError> {
    Marcher::new(problem, cfg)?.run(observer)
}

/// Two-level marching where the coarse level takes steps of `m·Δt`: fine
/// steps inside a slab use coarse values interpolated quadratically in time,
/// and the slab-end coarse solve is iterated with the fine march until the
/// coarse field settles. The first slab is marched step by step.
pub fn slab_march(problem: &dyn Problem, cfg: &MarchConfig, m: usize) -> Result<RunReport, VmsError> {
    slab_march_observed(problem, cfg, m, &mut |_| {})
}

pub fn slab_march_observed(
    problem: &dyn Problem,
    cfg: &MarchConfig,
    m: usize,
    observer: &mut dyn FnMut(&LevelState),
) -> Result<RunReport, VmsError> {
    if m == 0 || cfg.steps % m != 0 {
        return Err(VmsError::Setup(format!(
            "slab size {m} must be positive and divide {} steps",
            cfg.steps
        )));
    }
    if m == 1 {
        return march_observed(problem, cfg, observer);
    }
    if cfg.levels.len() != 2 {
        return Err(VmsError::Setup("slab marching needs exactly two levels".into()));
    }
    Marcher::new(problem, cfg)?.run_slabs(m, observer)
}

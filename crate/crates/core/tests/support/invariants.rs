//! Randomized structural checks for every module, shared by the `invariants`
//! test target and the acceptance runner. Each suite runs a deterministic
//! proptest runner and reports the first minimal failure as text.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use vmstd::assembly::{
    assemble_load, assemble_load_raw, build_operator, mass_1d, stiffness_1d, Axis1d, Space, Variant,
};
use vmstd::config::{RunConfig, SweepAxis};
use vmstd::grid::{build_hierarchy, hat_value, place_subdomain, IndexBox, LevelGrid, LevelSpec};
use vmstd::problems::{MovingGaussianProblem, Problem, SineDecayProblem};
use vmstd::separated::{Compression, SeparatedField};
use vmstd::td_solver::{
    apply_operator, initial_factors, solve_separated, sweep_metric, sweep_round, LinearSolver, SolveCriteria,
};
use vmstd::vms::{march_observed, transfer_moving, LevelState, MarchConfig};

/// Cases for the cheap algebraic properties.
pub const ALGEBRA_CASES: u32 = 256;
/// Cases for properties that run the alternating solver to a fixed point.
pub const SOLVER_CASES: u32 = 64;

pub struct Suite {
    pub name: &'static str,
    pub cases: u32,
    pub run: fn(u32) -> Result<(), String>,
}

pub fn suites() -> Vec<Suite> {
    let a = ALGEBRA_CASES;
    let s = SOLVER_CASES;
    vec![
        Suite { name: "grid: hats sum to one", cases: a, run: partition_of_unity },
        Suite { name: "grid: windows snap to parent nodes", cases: a, run: placements_snap },
        Suite { name: "separated: operations match dense tensors", cases: a, run: dense_semantics },
        Suite { name: "separated: a - a vanishes", cases: a, run: self_cancellation },
        Suite { name: "separated: compression is a projection", cases: a, run: compression_idempotent },
        Suite { name: "separated: text form is exact", cases: a, run: text_round_trip },
        Suite { name: "assembly: quadrature is exact", cases: a, run: quadrature_exact },
        Suite { name: "assembly: same-level matrices are symmetric", cases: a, run: symmetric_matrices },
        Suite { name: "assembly: operator rank bound", cases: a, run: rank_bound },
        Suite { name: "assembly: separable and sampled loads agree", cases: s, run: load_paths_agree },
        Suite { name: "td_solver: error energy does not grow", cases: s, run: energy_monotone },
        Suite { name: "td_solver: Dirichlet data is kept", cases: s, run: dirichlet_exact },
        Suite { name: "td_solver: reported criterion", cases: s, run: criterion_semantics },
        Suite { name: "td_solver: full rank meets the dense system", cases: s, run: dense_fixed_point },
        Suite { name: "vms: interfaces and outer boundary", cases: s, run: boundary_agreement },
        Suite { name: "vms: degenerate hierarchy is single-level", cases: s, run: degenerate_hierarchy },
        Suite { name: "vms: free decay energy", cases: s, run: energy_decay },
        Suite { name: "vms: resting source keeps the window", cases: s, run: resting_transfer },
        Suite { name: "problems: manufactured consistency", cases: a, run: manufactured_consistency },
        Suite { name: "config: text round trip", cases: a, run: config_round_trip },
    ]
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn lcg(seed: &mut u64) -> f64 {
    *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

fn random_field(bx: &IndexBox, q: usize, seed: u64) -> SeparatedField {
    let mut s = seed;
    let factors = (0..bx.dim())
        .map(|k| (0..q).map(|_| (0..bx.len(k)).map(|_| lcg(&mut s)).collect()).collect())
        .collect();
    SeparatedField::new(1, 0.125, bx.clone(), factors).unwrap()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dense_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Σ_q Π_k factor entries, axis 0 slowest.
fn oracle_dense(f: &SeparatedField) -> Vec<f64> {
    let lens = f.lens();
    let total: usize = lens.iter().product();
    (0..total)
        .map(|flat| {
            let idx = unflatten(flat, &lens);
            (0..f.rank())
                .map(|q| (0..lens.len()).map(|k| f.factor(k, q)[idx[k]]).product::<f64>())
                .sum()
        })
        .collect()
}

fn unflatten(mut flat: usize, lens: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; lens.len()];
    for k in (0..lens.len()).rev() {
        idx[k] = flat % lens[k];
        flat /= lens[k];
    }
    idx
}

fn close(got: &[f64], want: &[f64], tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(got.len(), want.len());
    let scale = max_abs(want).max(1.0);
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        prop_assert!((a - b).abs() <= tol * scale, "entry {}: {} vs {}", i, a, b);
    }
    Ok(())
}

/// Shapes up to 12 nodes per axis in one to three dimensions.
fn shape() -> impl Strategy<Value = (Vec<usize>, usize, u64)> {
    (1usize..=3).prop_flat_map(|d| (proptest::collection::vec(2usize..=12, d), 0usize..=4, any::<u64>()))
}

fn cube_box(lens: &[usize], offset: usize) -> IndexBox {
    IndexBox::new(vec![offset; lens.len()], lens.iter().map(|n| offset + n - 1).collect())
}

fn unit_hierarchy(n1: usize, window: usize, ratio: usize, dim: usize) -> Vec<LevelGrid> {
    let h2 = 1.0 / (n1 * ratio) as f64;
    build_hierarchy(
        &[
            LevelSpec { cells: n1, length: 1.0 },
            LevelSpec {
                cells: window * ratio,
                length: (window * ratio) as f64 * h2,
            },
        ],
        dim,
    )
    .unwrap()
}

fn partition_of_unity(cases: u32) -> Result<(), String> {
    check(cases, (1usize..=64, 1usize..=8, 0.0f64..=1.0), |(n, ratio, x)| {
        let grids = unit_hierarchy(n, n, ratio, 1);
        for g in &grids {
            let s: f64 = (0..=g.lattice_cells)
                .map(|j| hat_value(g, 0, j, x).unwrap())
                .sum();
            let tol = 4.0 * f64::EPSILON * g.lattice_cells as f64;
            prop_assert!((s - 1.0).abs() <= tol, "level {} sums to {}", g.level, s);
        }
        Ok(())
    })
}

fn placements_snap(cases: u32) -> Result<(), String> {
    let strategy = (
        2usize..=32,
        1usize..=6,
        1usize..=8,
        proptest::collection::vec(0.0f64..=1.0, 2),
        proptest::collection::vec(-1.0f64..=1.0, 2),
    );
    check(cases, strategy, |(n1, ratio, w, start, vel)| {
        let window = w.min(n1);
        let grids = unit_hierarchy(n1, window, ratio, 2);
        let (parent, child) = (&grids[0], &grids[1]);
        let pbox = parent.domain_box();
        let center = |t: f64| -> Vec<f64> { (0..2).map(|k| (start[k] + vel[k] * t).clamp(0.0, 1.0)).collect() };
        let mut prev = None;
        for step in 0..12 {
            let t = step as f64 / 11.0;
            let p = place_subdomain(parent, &pbox, child, &center(t), step);
            prop_assert_eq!(&p, &place_subdomain(parent, &pbox, child, &center(t), step));
            prop_assert_eq!(p.extent_cells, window);
            prop_assert!(pbox.contains_box(&p.parent_box()));
            let cb = p.child_box();
            for k in 0..2 {
                let xc = child.coordinate(k, cb.lo[k]);
                let xp = parent.coordinate(k, p.lower_corner_index[k]);
                prop_assert!((xc - xp).abs() < 1e-14);
                prop_assert!(cb.hi[k] <= child.lattice_cells);
            }
            if let Some(q) = &prev {
                let shift = p.shift_from(q);
                for k in 0..2 {
                    prop_assert_eq!(shift[k].rem_euclid(ratio as i64), 0);
                    prop_assert_eq!(cb.lo[k] as i64 - q.child_box().lo[k] as i64, shift[k]);
                }
            }
            prev = Some(p);
        }
        Ok(())
    })
}

fn dense_semantics(cases: u32) -> Result<(), String> {
    let strategy = shape().prop_flat_map(|(lens, q, seed)| {
        let ranges: Vec<_> = lens.iter().map(|&n| (0..=n, 0..=n)).collect();
        (Just(lens), Just(q), Just(seed), ranges, -3.0f64..3.0)
    });
    check(cases, strategy, |(lens, q, seed, ranges, s)| {
        let bx = cube_box(&lens, 3);
        let a = random_field(&bx, q, seed);
        let b = random_field(&bx, (q + 1) % 4, seed ^ 0x9e37);
        let (da, db) = (oracle_dense(&a), oracle_dense(&b));
        close(&a.to_dense(), &da, 1e-14)?;

        let sum: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x + y).collect();
        close(&a.add(&b).unwrap().to_dense(), &sum, 1e-13)?;
        let diff: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x - y).collect();
        close(&a.sub(&b).unwrap().to_dense(), &diff, 1e-13)?;
        let scaled: Vec<f64> = da.iter().map(|x| s * x).collect();
        close(&a.scale(s).to_dense(), &scaled, 1e-13)?;

        let ranges: Vec<_> = ranges.iter().map(|(x, y)| *x.min(y)..*x.max(y)).collect();
        let masked: Vec<f64> = da
            .iter()
            .enumerate()
            .map(|(flat, v)| {
                let idx = unflatten(flat, &lens);
                if idx.iter().zip(&ranges).all(|(i, r)| r.contains(i)) {
                    *v
                } else {
                    0.0
                }
            })
            .collect();
        close(&a.mask(&ranges).unwrap().to_dense(), &masked, 0.0)?;

        // shifted target box: overlap copied, rest zero
        let target = IndexBox::new(bx.lo.iter().map(|l| l + 1).collect(), bx.hi.iter().map(|h| h + 2).collect());
        let restricted = a.restrict_to(&target);
        prop_assert_eq!(restricted.index_box(), &target);
        let tl = target.lens();
        let want: Vec<f64> = (0..target.node_count())
            .map(|flat| {
                let idx = unflatten(flat, &tl);
                let g: Vec<usize> = idx.iter().zip(&target.lo).map(|(i, l)| i + l).collect();
                if g.iter().zip(&bx.hi).all(|(x, h)| x <= h) {
                    let local: Vec<usize> = g.iter().zip(&bx.lo).map(|(x, l)| x - l).collect();
                    da[local.iter().zip(&lens).fold(0, |acc, (i, n)| acc * n + i)]
                } else {
                    0.0
                }
            })
            .collect();
        close(&restricted.to_dense(), &want, 0.0)?;

        for flat in [0, da.len() / 2, da.len() - 1] {
            let got = a.evaluate_nodal(&unflatten(flat, &lens)).unwrap();
            prop_assert!((got - da[flat]).abs() <= 1e-14 * max_abs(&da).max(1.0));
        }
        let norm = dense_norm(&da);
        prop_assert!((a.frobenius_norm() - norm).abs() <= 1e-10 * norm.max(1e-300));
        close(&a.compress(Compression::default()).to_dense(), &da, 1e-10)?;
        Ok(())
    })
}

fn self_cancellation(cases: u32) -> Result<(), String> {
    check(cases, shape(), |(lens, q, seed)| {
        let a = random_field(&cube_box(&lens, 0), q.max(1), seed);
        let zero = a.add(&a.scale(-1.0)).unwrap();
        prop_assert!(zero.frobenius_norm() < 1e-10 * a.frobenius_norm());
        Ok(())
    })
}

fn compression_idempotent(cases: u32) -> Result<(), String> {
    let strategy = (shape(), prop_oneof![Just(None), (1usize..=3).prop_map(Some)]);
    check(cases, strategy, |((lens, q, seed), cap)| {
        // duplicated and scaled modes make the stack compressible
        let a = random_field(&cube_box(&lens, 0), q, seed);
        let a = a.add(&a.scale(0.5)).unwrap();
        let c = match cap {
            None => Compression::tol(1e-10),
            Some(m) => Compression::rank(m),
        };
        let once = a.compress(c);
        let twice = once.compress(c);
        let (d1, d2) = (once.to_dense(), twice.to_dense());
        let scale = dense_norm(&d1).max(1e-300);
        let gap = dense_norm(&d1.iter().zip(&d2).map(|(x, y)| x - y).collect::<Vec<_>>());
        prop_assert!(gap <= 1e-10 * scale, "gap {}", gap / scale);
        prop_assert!(twice.rank() <= once.rank());
        Ok(())
    })
}

fn text_round_trip(cases: u32) -> Result<(), String> {
    check(cases, shape(), |(lens, q, seed)| {
        let a = random_field(&cube_box(&lens, 2), q, seed);
        let b = SeparatedField::from_text(&a.to_text()).unwrap();
        prop_assert_eq!(a, b);
        Ok(())
    })
}

/// Exact ∫ over `[a, b]` of products of two piecewise-linear hats: Simpson's
/// rule on every fine cell, exact for quadratics.
fn hat_pair_oracle(test: &Axis1d, trial: &Axis1d, a: f64, b: f64, deriv: bool) -> DMatrix<f64> {
    let hf = test.mesh_size.min(trial.mesh_size);
    let hat = |ax: &Axis1d, j: usize, x: f64| {
        let s = (x - j as f64 * ax.mesh_size) / ax.mesh_size;
        if deriv {
            if (-1.0..0.0).contains(&s) {
                1.0 / ax.mesh_size
            } else if s > 0.0 && s <= 1.0 {
                -1.0 / ax.mesh_size
            } else {
                0.0
            }
        } else {
            (1.0 - s.abs()).max(0.0)
        }
    };
    let cells = ((b - a) / hf).round() as usize;
    DMatrix::from_fn(test.len(), trial.len(), |i, j| {
        (0..cells)
            .map(|c| {
                let x0 = a + c as f64 * hf;
                let xm = x0 + 0.5 * hf;
                let f = |x: f64| hat(test, test.lo + i, x) * hat(trial, trial.lo + j, x);
                if deriv {
                    // slopes are constant inside the cell
                    hf * f(xm)
                } else {
                    hf / 6.0 * (f(x0) + 4.0 * f(xm) + f(x0 + hf))
                }
            })
            .sum()
    })
}

fn quadrature_exact(cases: u32) -> Result<(), String> {
    let strategy = (2usize..=8, prop::sample::select(vec![1usize, 2, 4, 8, 16, 32]), 0usize..8, 1usize..=8, any::<bool>());
    check(cases, strategy, |(n, zeta, c0, width, swap)| {
        let c0 = c0.min(n - 1);
        let c1 = (c0 + width).min(n);
        let h = 1.0 / n as f64;
        let coarse = Axis1d::new(h, 0, n);
        let fine = Axis1d::new(h / zeta as f64, c0 * zeta, c1 * zeta);
        let (test, trial) = if swap { (&fine, &coarse) } else { (&coarse, &fine) };
        let interval = (c0 as f64 * h, c1 as f64 * h);
        for deriv in [false, true] {
            let m = if deriv {
                stiffness_1d(test, trial, interval).unwrap()
            } else {
                mass_1d(test, trial, interval).unwrap()
            };
            let want = hat_pair_oracle(test, trial, interval.0, interval.1, deriv);
            for i in 0..test.len() {
                for j in 0..trial.len() {
                    let (g, w) = (m.get(i, j), want[(i, j)]);
                    prop_assert!((g - w).abs() <= 1e-14 * w.abs().max(1.0), "({}, {}) {} vs {}", i, j, g, w);
                }
            }
        }
        Ok(())
    })
}

fn symmetric_matrices(cases: u32) -> Result<(), String> {
    check(cases, (1usize..=40, 0usize..20, 1usize..=20), |(n, lo, len)| {
        let lo = lo.min(n - 1);
        let hi = (lo + len).min(n);
        let h = 1.0 / n as f64;
        let ax = Axis1d::new(h, lo, hi);
        let region = (lo as f64 * h, hi as f64 * h);
        for m in [mass_1d(&ax, &ax, region).unwrap(), stiffness_1d(&ax, &ax, region).unwrap()] {
            for i in 0..ax.len() {
                for j in 0..ax.len() {
                    let (a, b) = (m.get(i, j), m.get(j, i));
                    prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()), "{} vs {}", a, b);
                }
            }
        }
        Ok(())
    })
}

fn rank_bound(cases: u32) -> Result<(), String> {
    let strategy = (2usize..=3, 2usize..=8, 0usize..=4, any::<u64>(), any::<bool>());
    check(cases, strategy, |(d, n, q, seed, hat)| {
        let sp = Space::new(1, 1.0 / n as f64, IndexBox::cube(d, 0, n));
        let variant = if hat { Variant::AHat } else { Variant::A };
        let op = build_operator(&sp, &sp, &sp.region(), 0.01, 0.05, variant).unwrap();
        let u = random_field(&sp.bx, q, seed);
        let lu = apply_operator(&op, &u).unwrap();
        prop_assert!(lu.rank() <= op.term_count() * q);
        let dense = op.to_dense() * DVector::from_vec(u.to_dense());
        close(&lu.to_dense(), dense.as_slice(), 1e-12)?;
        Ok(())
    })
}

fn load_paths_agree(cases: u32) -> Result<(), String> {
    let strategy = (8usize..=32, 0.0f64..=1.0, 0.03f64..=0.1, 0.25f64..=0.75, 0.25f64..=0.75);
    check(cases, strategy, |(n, t, sigma, mx, my)| {
        let p = MovingGaussianProblem {
            sigma,
            start: vec![mx, my],
            velocity: vec![0.2, -0.2],
            ..MovingGaussianProblem::benchmark_2d()
        };
        let sp = Space::new(1, 1.0 / n as f64, IndexBox::cube(2, 0, n));
        let sep = assemble_load(&p.source_terms(t), &sp, 2, 1e-12);
        let raw = assemble_load_raw(&|x| p.source_value(x, t), &sp, 2, 1e-12, 64).unwrap();
        let gap = raw.sub(&sep).unwrap().frobenius_norm();
        prop_assert!(gap < 1e-8 * sep.frobenius_norm(), "relative gap {}", gap / sep.frobenius_norm());
        Ok(())
    })
}

fn heat_op(n: usize, dt: f64, nu: f64) -> vmstd::OperatorFactorSum {
    let sp = Space::new(1, 1.0 / n as f64, IndexBox::cube(2, 0, n));
    build_operator(&sp, &sp, &sp.region(), dt, nu, Variant::A).unwrap()
}

fn interior(n: usize) -> Vec<usize> {
    (0..(n + 1) * (n + 1))
        .filter(|&p| {
            let (i, j) = (p / (n + 1), p % (n + 1));
            i > 0 && j > 0 && i < n && j < n
        })
        .collect()
}

/// Interior block of `op` and of `rhs`.
fn interior_system(op: &vmstd::OperatorFactorSum, rhs: &SeparatedField, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let idx = interior(n);
    let a = op.to_dense();
    let f = rhs.to_dense();
    (
        DMatrix::from_fn(idx.len(), idx.len(), |r, c| a[(idx[r], idx[c])]),
        DVector::from_iterator(idx.len(), idx.iter().map(|&p| f[p])),
    )
}

fn solver_case() -> impl Strategy<Value = (usize, f64, f64, usize, u64)> {
    (5usize..=12, 0.001f64..=0.1, 0.01f64..=0.2, 1usize..=3, any::<u64>())
}

/// Alternating Galerkin sweeps on a symmetric positive definite operator
/// minimize the energy norm of the error axis by axis, so that norm cannot
/// grow from one round to the next.
fn energy_monotone(cases: u32) -> Result<(), String> {
    check(cases, solver_case(), |(n, dt, nu, q, seed)| {
        let op = heat_op(n, dt, nu);
        let rhs = random_field(&op.test.bx, 3, seed);
        let (a, f) = interior_system(&op, &rhs, n);
        let exact = a.clone().lu().solve(&f).unwrap();
        let idx = interior(n);
        let mut last = f64::INFINITY;
        for rounds in 1..=5 {
            let crit = SolveCriteria {
                td_tol: 0.0,
                rho_max: rounds,
                ..Default::default()
            };
            let (u, _) = solve_separated(&op, &rhs, q, &crit, None, LinearSolver::Banded).unwrap();
            let d = u.to_dense();
            let e = DVector::from_iterator(idx.len(), idx.iter().map(|&p| d[p])) - &exact;
            let energy = e.dot(&(&a * &e));
            prop_assert!(energy <= last * (1.0 + 1e-9) + 1e-24, "round {}: {} after {}", rounds, energy, last);
            last = energy;
        }
        Ok(())
    })
}

fn dirichlet_exact(cases: u32) -> Result<(), String> {
    check(cases, solver_case(), |(n, dt, nu, q, seed)| {
        let op = heat_op(n, dt, nu);
        let bx = op.test.bx.clone();
        let rhs = random_field(&bx, 2, seed);
        let shell = random_field(&bx, 2, seed.rotate_left(7));
        let lift = shell.sub(&shell.mask(&[1..n, 1..n]).unwrap()).unwrap();
        let (u, _) = solve_separated(&op, &rhs, q, &SolveCriteria::default(), Some(&lift), LinearSolver::Banded)
            .unwrap();
        let (du, dl) = (u.to_dense(), lift.to_dense());
        let scale = max_abs(&dl).max(1.0);
        for i in 0..=n {
            for j in 0..=n {
                if i == 0 || j == 0 || i == n || j == n {
                    let p = i * (n + 1) + j;
                    prop_assert!((du[p] - dl[p]).abs() <= 1e-12 * scale, "node ({}, {})", i, j);
                }
            }
        }
        Ok(())
    })
}

/// Frobenius norm of the stacked `len × Q` factor matrix.
fn stacked_norm(axis: &[Vec<f64>]) -> f64 {
    let len = axis.first().map_or(0, |v| v.len());
    DMatrix::from_fn(len, axis.len(), |i, j| axis[j][i]).norm()
}

fn criterion_semantics(cases: u32) -> Result<(), String> {
    let strategy = (solver_case(), 1usize..=4);
    check(cases, strategy, |((n, dt, nu, q, seed), rounds)| {
        let op = heat_op(n, dt, nu);
        let rhs = random_field(&op.test.bx, 2, seed);
        let crit = SolveCriteria {
            td_tol: 0.0,
            rho_max: rounds,
            ..Default::default()
        };
        let (_, stats) = solve_separated(&op, &rhs, q, &crit, None, LinearSolver::Banded).unwrap();

        let folded = rhs.compress(Compression::default());
        let mut f = initial_factors(&op.test.bx.lens(), q);
        let mut old = f.clone();
        for _ in 0..rounds {
            old = f.clone();
            prop_assert!(sweep_round(&mut f, &op, &folded, LinearSolver::Banded).unwrap());
        }
        let want = (0..2)
            .map(|k| {
                let delta: Vec<Vec<f64>> = f[k]
                    .iter()
                    .zip(&old[k])
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                    .collect();
                (stacked_norm(&delta) / stacked_norm(&f[k])).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        prop_assert!((stats.metric - want).abs() <= 1e-12 * want.max(1e-300), "{} vs {}", stats.metric, want);
        prop_assert!((sweep_metric(&f, &old) - want).abs() <= 1e-12 * want.max(1e-300));
        prop_assert_eq!(stats.iterations, rounds);
        Ok(())
    })
}

fn dense_fixed_point(cases: u32) -> Result<(), String> {
    check(cases, (4usize..=10, 0.005f64..=0.05, 1usize..=3, any::<u64>()), |(n, dt, q, seed)| {
        let op = heat_op(n, dt, 0.05);
        let rhs = random_field(&op.test.bx, q, seed);
        let crit = SolveCriteria {
            td_tol: 1e-10,
            rho_max: 400,
            ..Default::default()
        };
        let (u, _) = solve_separated(&op, &rhs, n + 1, &crit, None, LinearSolver::Banded).unwrap();
        let idx = interior(n);
        let (ai, fi) = interior_system(&op, &rhs, n);
        let x = ai.lu().solve(&fi).unwrap();
        let got = u.to_dense();
        let scale = x.amax().max(1.0);
        for (r, &p) in idx.iter().enumerate() {
            prop_assert!((got[p] - x[r]).abs() <= 1e-6 * scale, "node {}: {} vs {}", p, got[p], x[r]);
        }
        Ok(())
    })
}

fn gaussian(start: Vec<f64>, velocity: Vec<f64>, sigma: f64) -> MovingGaussianProblem {
    MovingGaussianProblem {
        sigma,
        start,
        velocity,
        ..MovingGaussianProblem::benchmark_2d()
    }
}

fn two_level(n1: usize, window: usize, ratio: usize, steps: usize) -> MarchConfig {
    let h2 = 1.0 / (n1 * ratio) as f64;
    let mut cfg = MarchConfig::new(
        2,
        vec![
            LevelSpec { cells: n1, length: 1.0 },
            LevelSpec {
                cells: window * ratio,
                length: (window * ratio) as f64 * h2,
            },
        ],
        vec![2, 2],
        steps,
    );
    cfg.compute_errors = false;
    cfg
}

fn vms_case() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (
        4usize..=10,
        2usize..=6,
        1usize..=4,
        1usize..=3,
        proptest::collection::vec(0.2f64..=0.8, 2),
        proptest::collection::vec(-0.5f64..=0.5, 2),
    )
}

fn on_shell(bx: &IndexBox, g: &[usize]) -> bool {
    (0..bx.dim()).any(|k| g[k] == bx.lo[k] || g[k] == bx.hi[k])
}

fn boundary_agreement(cases: u32) -> Result<(), String> {
    check(cases, vms_case(), |(n1, w, ratio, steps, start, vel)| {
        let p = gaussian(start, vel, 0.08);
        let cfg = two_level(n1, w.min(n1), ratio, steps);
        let mut failure = None;
        march_observed(&p, &cfg, &mut |s: &LevelState| {
            if failure.is_some() {
                return;
            }
            let coarse = &s.fields[0];
            let cb = coarse.index_box().clone();
            for flat in 0..cb.node_count() {
                let idx = unflatten(flat, &cb.lens());
                let g: Vec<usize> = idx.iter().zip(&cb.lo).map(|(i, l)| i + l).collect();
                if on_shell(&cb, &g) && coarse.evaluate_nodal(&idx).unwrap() != 0.0 {
                    failure = Some(format!("step {}: coarse boundary node {:?} is not zero", s.step, g));
                    return;
                }
            }
            if s.step == 0 {
                return;
            }
            let fine = &s.fields[1];
            let fb = fine.index_box().clone();
            let hf = fine.mesh_size();
            let scale = coarse.mode_scale().max(1e-300);
            for flat in 0..fb.node_count() {
                let idx = unflatten(flat, &fb.lens());
                let g: Vec<usize> = idx.iter().zip(&fb.lo).map(|(i, l)| i + l).collect();
                if on_shell(&fb, &g) {
                    let x: Vec<f64> = g.iter().map(|&i| i as f64 * hf).collect();
                    let want = coarse.evaluate_point(&x).unwrap();
                    let got = fine.evaluate_nodal(&idx).unwrap();
                    if (got - want).abs() > 1e-10 * scale {
                        failure = Some(format!("step {}: node {:?} has {} against {}", s.step, g, got, want));
                        return;
                    }
                }
            }
        })
        .unwrap();
        prop_assert!(failure.is_none(), "{}", failure.unwrap_or_default());
        Ok(())
    })
}

fn collect_steps(p: &dyn Problem, cfg: &MarchConfig) -> Vec<SeparatedField> {
    let mut out = Vec::new();
    march_observed(p, cfg, &mut |s: &LevelState| out.push(s.fields.last().unwrap().clone())).unwrap();
    out
}

fn degenerate_hierarchy(cases: u32) -> Result<(), String> {
    let strategy = (6usize..=10, 1usize..=3, proptest::collection::vec(0.3f64..=0.7, 2), proptest::collection::vec(-0.2f64..=0.2, 2));
    check(cases, strategy, |(n, steps, start, vel)| {
        let p = gaussian(start, vel, 0.1);
        let mut cfg = two_level(n, n, 1, steps);
        cfg.modes = vec![n + 1, n + 1];
        cfg.criteria.td_tol = 1e-8;
        cfg.criteria.rho_max = 300;
        let mut single = cfg.clone();
        single.levels.truncate(1);
        single.modes.truncate(1);
        let two = collect_steps(&p, &cfg);
        let one = collect_steps(&p, &single);
        prop_assert_eq!(two.len(), one.len());
        for (k, (a, b)) in two.iter().zip(&one).enumerate().skip(1) {
            let b = SeparatedField::new(a.level(), a.mesh_size(), a.index_box().clone(), b.factors().to_vec()).unwrap();
            let rel = a.sub(&b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300);
            prop_assert!(rel < 1e-3, "step {}: relative gap {}", k, rel);
        }
        Ok(())
    })
}

fn energy_decay(cases: u32) -> Result<(), String> {
    let strategy = (1usize..=3, 0.01f64..=0.2, 4usize..=12, 1usize..=4, 2usize..=6);
    check(cases, strategy, |(mode, nu, n1, ratio, steps)| {
        let p = SineDecayProblem {
            dim: 2,
            nu,
            mode,
            final_time: 1.0,
        };
        let cfg = two_level(n1, (n1 / 2).max(2), ratio, steps);
        let mut norms = Vec::new();
        march_observed(&p, &cfg, &mut |s: &LevelState| norms.push(s.fields[0].frobenius_norm())).unwrap();
        for w in norms.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} after {}", w[1], w[0]);
        }
        Ok(())
    })
}

fn resting_transfer(cases: u32) -> Result<(), String> {
    let strategy = (vms_case(), any::<u64>());
    check(cases, strategy, |((n1, w, ratio, steps, start, _), seed)| {
        let p = gaussian(start, vec![0.0, 0.0], 0.08);
        let cfg = two_level(n1, w.min(n1), ratio, steps);
        let mut boxes = Vec::new();
        let mut last = None;
        march_observed(&p, &cfg, &mut |s: &LevelState| {
            boxes.push(s.fields[1].index_box().clone());
            last = Some(s.clone());
        })
        .unwrap();
        prop_assert!(boxes.windows(2).all(|b| b[0] == b[1]));
        let s = last.unwrap();
        let fine = s.fields[1].add(&random_field(s.fields[1].index_box(), 1, seed).scale(1e-3)).unwrap();
        let moved = transfer_moving(&fine, fine.index_box(), &s.fields[0], ratio, 1e-10).unwrap();
        let gap = moved.sub(&fine).unwrap().frobenius_norm();
        prop_assert!(gap <= 1e-10 * fine.frobenius_norm());
        Ok(())
    })
}

/// Fourth-order central differences of the exact solution.
fn heat_residual(p: &MovingGaussianProblem, x: &[f64], t: f64) -> f64 {
    let e = 1e-2 * p.sigma;
    let u = |x: &[f64], t: f64| p.exact(x, t).unwrap();
    let d1 = |g: &dyn Fn(f64) -> f64| (-g(2.0 * e) + 8.0 * g(e) - 8.0 * g(-e) + g(-2.0 * e)) / (12.0 * e);
    let d2 = |g: &dyn Fn(f64) -> f64| {
        (-g(2.0 * e) + 16.0 * g(e) - 30.0 * g(0.0) + 16.0 * g(-e) - g(-2.0 * e)) / (12.0 * e * e)
    };
    let ut = d1(&|s| u(x, t + s));
    let lap: f64 = (0..x.len())
        .map(|k| {
            d2(&|s| {
                let mut y = x.to_vec();
                y[k] += s;
                u(&y, t)
            })
        })
        .sum();
    ut - p.nu * lap
}

fn manufactured_consistency(cases: u32) -> Result<(), String> {
    let strategy = (
        2usize..=3,
        0.03f64..=0.1,
        1.0f64..=20.0,
        0.01f64..=0.1,
        0.05f64..=0.95,
        proptest::collection::vec(-2.0f64..=2.0, 3),
        proptest::collection::vec(-0.3f64..=0.3, 3),
    );
    check(cases, strategy, |(dim, sigma, lambda, nu, t, offset, vel)| {
        let p = MovingGaussianProblem {
            dim,
            nu,
            sigma,
            lambda,
            start: vec![0.5; dim],
            velocity: vel[..dim].to_vec(),
            length: 1.0,
            final_time: 1.0,
        };
        let c = p.source_center(t);
        let x: Vec<f64> = c.iter().zip(&offset).map(|(m, o)| m + o * sigma).collect();
        let f = p.source_value(&x, t);
        let r = heat_residual(&p, &x, t);
        let scale = lambda + nu / (sigma * sigma) + vel.iter().map(|v| v.abs()).sum::<f64>() / sigma;
        prop_assert!((f - r).abs() < 1e-6 * scale, "source {} against {}", f, r);
        Ok(())
    })
}

fn config_round_trip(cases: u32) -> Result<(), String> {
    let strategy = (
        (0.01f64..=0.2, 0.02f64..=0.1, 1.0f64..=20.0, 0.3f64..=0.7, -0.2f64..=0.2),
        (1usize..=4, prop::sample::select(vec![8usize, 16, 32, 64, 128]), 1usize..=100, 1e-6f64..=1e-1),
        (any::<bool>(), any::<bool>(), 0usize..5, proptest::collection::vec(1u32..=64, 1..6)),
        "[a-z][a-z0-9-]{0,12}",
    );
    check(cases, strategy, |((nu, sigma, lambda, s0, v0), (q, steps, rho, tol), (warm, reference, axis, values), name)| {
        let mut c = RunConfig::default();
        c.name = name;
        c.problem.nu = nu;
        c.problem.sigma = sigma;
        c.problem.lambda = lambda;
        c.problem.start = vec![s0, 1.0 - s0];
        c.problem.velocity = vec![v0, -v0];
        c.solver.modes = vec![q, q + 1];
        c.solver.steps = steps;
        c.solver.rho_max = rho;
        c.solver.td_tol = tol;
        c.solver.warm_start = warm;
        c.reference.enabled = reference;
        c.sweep.axis = [None, Some(SweepAxis::Nt), Some(SweepAxis::L2), Some(SweepAxis::Slab), Some(SweepAxis::Zeta)][axis];
        c.sweep.values = values
            .iter()
            .map(|&v| match c.sweep.axis {
                Some(SweepAxis::L2) => v as f64 / 80.0,
                Some(SweepAxis::Nt) => v as f64,
                _ => (1u32 << (v % 4)) as f64,
            })
            .collect();
        if c.sweep.axis.is_none() {
            c.sweep.values.clear();
        }
        prop_assume!(c.validate().is_ok());
        let text = c.to_text();
        let back = RunConfig::parse(&text).map_err(|e| TestCaseError::fail(format!("{e:?}\n{text}")))?;
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_text(), text);
        Ok(())
    })
}

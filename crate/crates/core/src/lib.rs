//! Time-marching multi-level variational multiscale tensor decomposition for
//! transient heat conduction driven by a moving heat source.
//!
//! The coarse field lives on the whole domain, finer fields on nested windows
//! that follow the source. Every field is stored as a sum of rank-one products
//! of per-axis vectors and every linear system is solved one axis at a time.

pub mod assembly;
pub mod config;
pub mod grid;
pub mod linalg;
pub mod problems;
pub mod separated;
pub mod study;
pub mod td_solver;
pub mod verify;
pub mod vms;

pub use assembly::{OperatorFactorSum, SeparableSourceTerm, Variant};
pub use config::RunConfig;
pub use grid::{IndexBox, LevelGrid, LevelSpec, SubdomainPlacement};
pub use problems::{MovingGaussianProblem, Problem};
pub use separated::{Compression, SeparatedField};
pub use td_solver::{LinearSolver, SolveCriteria};
pub use vms::{LevelState, RunReport};

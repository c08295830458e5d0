//! Heat problems with manufactured exact solutions.
//!
//! The main family is a Gaussian bump that follows an affine trajectory and is
//! switched on by the ramp `1 − e^{−λt}`; its source is the residual
//! `u_t − νΔu` of that bump, which separates into a handful of rank-one terms.

use std::sync::Arc;

use crate::assembly::{AxisFn, SeparableSourceTerm};

pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;
    fn nu(&self) -> f64;
    fn domain_length(&self) -> f64;
    fn final_time(&self) -> f64;
    /// Point the finest window follows.
    fn source_center(&self, t: f64) -> Vec<f64>;
    /// Separated expansion of `f(·, t)`.
    fn source_terms(&self, t: f64) -> Vec<SeparableSourceTerm>;
    fn source_value(&self, x: &[f64], t: f64) -> f64 {
        self.source_terms(t).iter().map(|s| s.evaluate(x)).sum()
    }
    /// Separated expansion of the exact solution, when one is known.
    fn exact_terms(&self, t: f64) -> Option<Vec<SeparableSourceTerm>>;
    fn exact(&self, x: &[f64], t: f64) -> Option<f64> {
        self.exact_terms(t)
            .map(|terms| terms.iter().map(|s| s.evaluate(x)).sum())
    }
    /// Separated initial condition.
    fn initial_terms(&self) -> Vec<SeparableSourceTerm> {
        self.exact_terms(0.0).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovingGaussianProblem {
    pub dim: usize,
    pub nu: f64,
    pub sigma: f64,
    pub lambda: f64,
    /// μ_k(t) = start_k + velocity_k · t
    pub start: Vec<f64>,
    pub velocity: Vec<f64>,
    pub length: f64,
    pub final_time: f64,
}

impl MovingGaussianProblem {
    /// Diagonal sweep from (0.3, 0.3) to (0.7, 0.7) over unit time.
    pub fn benchmark_2d() -> Self {
        Self {
            dim: 2,
            nu: 0.05,
            sigma: 0.05,
            lambda: 10.0,
            start: vec![0.3, 0.3],
            velocity: vec![0.4, 0.4],
            length: 1.0,
            final_time: 1.0,
        }
    }

    /// The 2D bump held at the domain centre.
    pub fn fixed_2d() -> Self {
        Self {
            start: vec![0.5, 0.5],
            velocity: vec![0.0, 0.0],
            ..Self::benchmark_2d()
        }
    }

    /// Narrow 3D bump moving along y through the centre of the cube.
    pub fn benchmark_3d() -> Self {
        Self {
            dim: 3,
            nu: 0.05,
            sigma: 0.02,
            lambda: 10.0,
            start: vec![0.5, 0.3, 0.5],
            velocity: vec![0.0, 0.4, 0.0],
            length: 1.0,
            final_time: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma > 0.0 && self.lambda > 0.0 && self.nu > 0.0) {
            return Err("sigma, lambda and nu must be positive".into());
        }
        if self.start.len() != self.dim || self.velocity.len() != self.dim {
            return Err("trajectory length must equal the dimension".into());
        }
        for k in 0..self.dim {
            for t in [0.0, self.final_time] {
                let m = self.mu(k, t);
                if !(0.0..=self.length).contains(&m) {
                    return Err(format!("trajectory leaves the domain on axis {k}"));
                }
            }
        }
        Ok(())
    }

    pub fn mu(&self, axis: usize, t: f64) -> f64 {
        self.start[axis] + self.velocity[axis] * t
    }

    fn ramp(&self, t: f64) -> f64 {
        -(-self.lambda * t).exp_m1()
    }

    fn gaussian(&self, axis: usize, t: f64, power: i32) -> AxisFn {
        let mu = self.mu(axis, t);
        let c = 1.0 / (2.0 * self.sigma * self.sigma);
        Arc::new(move |x: f64| {
            let a = x - mu;
            a.powi(power) * (-a * a * c).exp()
        })
    }

    /// The separated source; kept separate from the trait for direct use.
    pub fn separable_expansion(&self, t: f64) -> Vec<SeparableSourceTerm> {
        let d = self.dim;
        let s2 = self.sigma * self.sigma;
        let r = self.ramp(t);
        let dr = self.lambda * (-self.lambda * t).exp();
        let plain: Vec<AxisFn> = (0..d).map(|k| self.gaussian(k, t, 0)).collect();
        let mut terms = vec![SeparableSourceTerm {
            weight: dr + d as f64 * self.nu * r / s2,
            factors: plain.clone(),
        }];
        for k in 0..d {
            if self.velocity[k] != 0.0 {
                let mut f = plain.clone();
                f[k] = self.gaussian(k, t, 1);
                terms.push(SeparableSourceTerm {
                    weight: r * self.velocity[k] / s2,
                    factors: f,
                });
            }
        }
        for k in 0..d {
            let mut f = plain.clone();
            f[k] = self.gaussian(k, t, 2);
            terms.push(SeparableSourceTerm {
                weight: -self.nu * r / (s2 * s2),
                factors: f,
            });
        }
        terms
    }

    /// Direct evaluation of the bracketed source formula.
    pub fn source_formula(&self, x: &[f64], t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        let r = self.ramp(t);
        let mut bracket = self.lambda * (-self.lambda * t).exp() + self.dim as f64 * self.nu * r / s2;
        let mut g = 1.0;
        for (k, &xk) in x.iter().enumerate() {
            let a = xk - self.mu(k, t);
            bracket += r * (self.velocity[k] * a / s2 - self.nu * a * a / (s2 * s2));
            g *= (-a * a / (2.0 * s2)).exp();
        }
        bracket * g
    }
}

impl Problem for MovingGaussianProblem {
    fn dim(&self) -> usize {
        self.dim
    }
    fn nu(&self) -> f64 {
        self.nu
    }
    fn domain_length(&self) -> f64 {
        self.length
    }
    fn final_time(&self) -> f64 {
        self.final_time
    }
    fn source_center(&self, t: f64) -> Vec<f64> {
        (0..self.dim).map(|k| self.mu(k, t)).collect()
    }
    fn source_terms(&self, t: f64) -> Vec<SeparableSourceTerm> {
        self.separable_expansion(t)
    }
    fn source_value(&self, x: &[f64], t: f64) -> f64 {
        self.source_formula(x, t)
    }
    fn exact_terms(&self, t: f64) -> Option<Vec<SeparableSourceTerm>> {
        Some(vec![SeparableSourceTerm {
            weight: self.ramp(t),
            factors: (0..self.dim).map(|k| self.gaussian(k, t, 0)).collect(),
        }])
    }
    fn exact(&self, x: &[f64], t: f64) -> Option<f64> {
        let s2 = self.sigma * self.sigma;
        let e: f64 = x
            .iter()
            .enumerate()
            .map(|(k, &xk)| (xk - self.mu(k, t)).powi(2))
            .sum();
        Some(self.ramp(t) * (-e / (2.0 * s2)).exp())
    }
}

/// `f ≡ 0`, zero data; the solution stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroProblem {
    pub dim: usize,
    pub nu: f64,
    pub final_time: f64,
    pub center: Vec<f64>,
}

impl ZeroProblem {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            nu: 0.05,
            final_time: 1.0,
            center: vec![0.5; dim],
        }
    }
}

impl Problem for ZeroProblem {
    fn dim(&self) -> usize {
        self.dim
    }
    fn nu(&self) -> f64 {
        self.nu
    }
    fn domain_length(&self) -> f64 {
        1.0
    }
    fn final_time(&self) -> f64 {
        self.final_time
    }
    fn source_center(&self, _t: f64) -> Vec<f64> {
        self.center.clone()
    }
    fn source_terms(&self, _t: f64) -> Vec<SeparableSourceTerm> {
        Vec::new()
    }
    fn exact_terms(&self, _t: f64) -> Option<Vec<SeparableSourceTerm>> {
        Some(Vec::new())
    }
}

/// Free decay of `Π_k sin(mπx_k)` on the unit cube with `f ≡ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SineDecayProblem {
    pub dim: usize,
    pub nu: f64,
    pub mode: usize,
    pub final_time: f64,
}

impl Problem for SineDecayProblem {
    fn dim(&self) -> usize {
        self.dim
    }
    fn nu(&self) -> f64 {
        self.nu
    }
    fn domain_length(&self) -> f64 {
        1.0
    }
    fn final_time(&self) -> f64 {
        self.final_time
    }
    fn source_center(&self, _t: f64) -> Vec<f64> {
        vec![0.5; self.dim]
    }
    fn source_terms(&self, _t: f64) -> Vec<SeparableSourceTerm> {
        Vec::new()
    }
    fn exact_terms(&self, t: f64) -> Option<Vec<SeparableSourceTerm>> {
        let k = self.mode as f64 * std::f64::consts::PI;
        let g: AxisFn = Arc::new(move |x: f64| (k * x).sin());
        Some(vec![SeparableSourceTerm {
            weight: (-(self.dim as f64) * self.nu * k * k * t).exp(),
            factors: vec![g; self.dim],
        }])
    }
}

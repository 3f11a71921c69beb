//! Bound-constrained solvers: a limited-memory quasi-Newton method
//! (gradient-projection Cauchy point with subspace minimization over the
//! free variables) and an Adam warm-starter with best-iterate retention.

mod adam;
mod lbfgsb;

pub use adam::adam_minimize;
pub use lbfgsb::lbfgsb_minimize;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SysidError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsbOptions {
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Budget of objective evaluations (each call counts, including line
    /// search trials).
    pub max_fun_evals: usize,
    /// Stop when the projected-gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop on relative objective decrease below this.
    pub ftol: f64,
    /// Sufficient-decrease constant of the strong Wolfe conditions.
    pub c1: f64,
    /// Curvature constant of the strong Wolfe conditions.
    pub c2: f64,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        LbfgsbOptions {
            memory: 10,
            max_fun_evals: 1000,
            grad_tol: 1e-8,
            ftol: 1e-10,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

impl LbfgsbOptions {
    pub fn validate(&self) -> Result<()> {
        if self.memory < 1 {
            return Err(SysidError::InvalidConfig("memory must be >= 1".into()));
        }
        if self.grad_tol <= 0.0 || self.ftol <= 0.0 {
            return Err(SysidError::InvalidConfig("tolerances must be > 0".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(SysidError::InvalidConfig(
                "line search requires 0 < c1 < c2 < 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamOptions {
    pub iters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Return the best-loss iterate seen rather than the last one.
    pub track_best: bool,
}

impl Default for AdamOptions {
    fn default() -> Self {
        AdamOptions {
            iters: 1000,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            track_best: true,
        }
    }
}

impl AdamOptions {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(SysidError::InvalidConfig(
                "learning rate must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SysidError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    FevalBudget,
    LineSearchFailure,
}

/// Outcome of a bounded solve; `x_opt` is feasible and `f_opt` never
/// exceeds the objective at the starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub x_opt: DVector<f64>,
    pub f_opt: f64,
    pub n_fun_evals: usize,
    pub n_iters: usize,
    pub status: SolveStatus,
    pub projected_grad_norm: f64,
}

/// Per-iteration record passed to optional progress callbacks.
#[derive(Debug, Clone, Copy)]
pub struct IterationLog {
    pub iter: usize,
    pub f: f64,
    pub projected_grad_norm: f64,
}

pub(crate) fn clip_into_bounds(x: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Infinity norm of the projected gradient `P(x - g) - x`.
pub(crate) fn projected_grad_inf_norm(
    x: &DVector<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..x.len() {
        let step = (x[i] - g[i]).clamp(lower[i], upper[i]) - x[i];
        norm = norm.max(step.abs());
    }
    norm
}

//! Levenberg-Marquardt on the manifold.

use log::debug;
use serde::{Deserialize, Serialize};

use super::{Problem, ScaledFactor, SolverError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub relative_cost_tolerance: f64,
    /// Stop when `max |Jᵀr|` falls below this.
    pub gradient_tolerance: f64,
    pub initial_lambda: f64,
    /// Problems with fewer columns use a dense Cholesky.
    pub dense_limit: usize,
    /// Minimum squared pivot of the Jacobi-scaled information matrix.
    pub rank_tolerance: f64,
    /// Check the undamped information matrix for rank deficiency first.
    pub check_rank: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_cost_tolerance: 1e-10,
            gradient_tolerance: 1e-8,
            initial_lambda: 1e-4,
            dense_limit: 500,
            rank_tolerance: 1e-12,
            check_rank: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostConverged,
    GradientConverged,
    /// Damping grew without finding a decrease; the estimate is a local minimum
    /// to machine precision.
    NoImprovement,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    /// Per-coordinate reprojection RMSE [px], when the problem has reprojection factors.
    pub rmse_px: Option<f64>,
}

/// Minimizes the robustified cost of `problem` in place.
pub fn solve(problem: &mut Problem, opts: &SolverOptions) -> Result<SolveReport, SolverError> {
    let layout = problem.layout(&[]);
    if layout.total == 0 {
        return Err(SolverError::NoFreeBlocks);
    }
    let mut lin = problem.linearize(&layout, true)?;
    if !lin.cost.is_finite() {
        return Err(SolverError::Diverged("non-finite initial cost".into()));
    }
    if opts.check_rank {
        ScaledFactor::new(&lin.h, &layout, opts.dense_limit, opts.rank_tolerance)?;
    }
    let initial_cost = lin.cost;
    let mut lambda = opts.initial_lambda;
    let mut nu = 2.0;
    let mut iterations = 0;
    let termination = loop {
        if lin.b.amax() < opts.gradient_tolerance {
            break Termination::GradientConverged;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let diag = lin.h.diagonal();
        let mut accepted = None;
        while lambda < 1e16 {
            let mut damped = lin.h.clone();
            damped.add_diagonal(&(diag.map(|d| d.max(1e-12)) * lambda));
            let step = match ScaledFactor::new(&damped, &layout, opts.dense_limit, 0.0) {
                Ok(f) => f.solve(&lin.b),
                Err(_) => {
                    lambda *= nu;
                    nu *= 2.0;
                    continue;
                }
            };
            let candidate = problem.retract(&layout, &step);
            // a step that leaves IMU coverage is rejected like a cost increase
            let new_cost = match candidate.cost() {
                Ok(c) => c,
                Err(SolverError::Imu(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            // predicted decrease of the quadratic model: δᵀb − ½δᵀHδ
            let predicted = step.dot(&lin.b) - 0.5 * step.dot(&lin.h.mul_vec(&step));
            let actual = lin.cost - new_cost;
            if new_cost.is_finite() && actual >= 0.0 {
                let rho = if predicted > 0.0 { actual / predicted } else { 1.0 };
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                accepted = Some((candidate, actual, step));
                break;
            }
            lambda *= nu;
            nu *= 2.0;
        }
        let Some((candidate, decrease, step)) = accepted else {
            break Termination::NoImprovement;
        };
        debug!(
            "lm iter {iterations}: cost {:.6e} -> {:.6e}, |step| {:.3e}, lambda {lambda:.1e}",
            lin.cost,
            lin.cost - decrease,
            step.norm()
        );
        let relative = decrease / lin.cost.max(f64::MIN_POSITIVE);
        *problem = candidate;
        lin = problem.linearize(&layout, true)?;
        if !lin.cost.is_finite() {
            return Err(SolverError::Diverged("non-finite cost".into()));
        }
        if relative < opts.relative_cost_tolerance {
            break Termination::CostConverged;
        }
    };
    Ok(SolveReport {
        iterations,
        initial_cost,
        final_cost: lin.cost,
        termination,
        rmse_px: problem.reprojection_rmse()?,
    })
}

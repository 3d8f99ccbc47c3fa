//! Marginal information and covariance of selected blocks.

use nalgebra::DMatrix;

use super::{BlockId, Problem, ScaledFactor, SolverError};

/// Information `Σ_θθ⁻¹` of the blocks `θ` with every other free block
/// eliminated, plus its log-determinant.
#[derive(Debug, Clone)]
pub struct MarginalInformation {
    pub information: DMatrix<f64>,
    pub log_det: f64,
    /// Active columns per θ block, in order.
    pub dims: Vec<usize>,
}

impl MarginalInformation {
    /// Condition number of the Jacobi-scaled information.
    pub fn scaled_condition(&self) -> f64 {
        let n = self.information.nrows();
        let d = self.information.diagonal().map(|v| 1.0 / v.sqrt());
        let scaled = DMatrix::from_fn(n, n, |i, j| self.information[(i, j)] * d[i] * d[j]);
        let eig = scaled.symmetric_eigen().eigenvalues;
        eig.max() / eig.min()
    }
}

/// Fisher information (no robust weighting) marginalized onto `theta`.
pub fn marginal_information(problem: &Problem, theta: &[BlockId]) -> Result<MarginalInformation, SolverError> {
    marginal_information_with(problem, theta, 500, 1e-12)
}

pub(crate) fn marginal_information_with(
    problem: &Problem,
    theta: &[BlockId],
    dense_limit: usize,
    pivot_tol: f64,
) -> Result<MarginalInformation, SolverError> {
    for id in theta {
        if problem.block(*id)?.is_fixed() {
            return Err(SolverError::InvalidBlock {
                block: *id,
                reason: "θ block is fixed".into(),
            });
        }
    }
    let layout = problem.layout(theta);
    let lin = problem.linearize(&layout, false)?;
    let k = layout.trailing_cols(theta);
    let f = ScaledFactor::new(&lin.h, &layout, dense_limit, pivot_tol)?;
    let (information, log_det) = f.trailing_information(k);
    let dims = theta.iter().map(|id| layout.dims[layout.index[id]].len()).collect();
    Ok(MarginalInformation {
        information,
        log_det,
        dims,
    })
}

/// Marginal covariance `Σ_θθ`: the θθ block of the inverse Fisher matrix.
pub fn marginal_covariance(problem: &Problem, theta: &[BlockId]) -> Result<DMatrix<f64>, SolverError> {
    let info = marginal_information(problem, theta)?;
    let chol = info.information.clone().cholesky().ok_or(SolverError::RankDeficient {
        block: theta[0],
        pivot: 0.0,
    })?;
    let cov = chol.inverse();
    Ok((&cov + cov.transpose()) * 0.5)
}

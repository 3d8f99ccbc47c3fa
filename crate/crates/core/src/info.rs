//! Mutual information and entropy of Gaussian calibration posteriors.
//!
//! All quantities are in nats.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{marginal_information, BlockId, MarginalInformation, Problem, SolverError};

#[derive(Debug, Error)]
pub enum InfoError {
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Score of one candidate set of measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoScore {
    pub candidate: usize,
    /// `½ (log|Σ_before| − log|Σ_after|)`.
    pub mutual_info: f64,
    /// `log|Σ_θθ|` before adding the candidate.
    pub logdet_before: f64,
    /// `log|Σ_θθ|` after adding the candidate.
    pub logdet_after: f64,
}

/// Differential entropy `½ ln((2πe)ⁿ |Σ|)` of a Gaussian.
pub fn shannon_entropy(cov: &DMatrix<f64>) -> Result<f64, InfoError> {
    let n = cov.nrows();
    let sym = (cov + cov.transpose()) * 0.5;
    let chol = sym.cholesky().ok_or(InfoError::NotPositiveDefinite)?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(entropy_from_logdet(n, logdet))
}

/// Entropy from the covariance log-determinant.
pub fn entropy_from_logdet(n: usize, logdet_cov: f64) -> f64 {
    0.5 * (n as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + logdet_cov)
}

/// Entropy of the marginal posterior described by `info`.
pub fn marginal_entropy(info: &MarginalInformation) -> f64 {
    entropy_from_logdet(info.information.nrows(), -info.log_det)
}

/// Mutual information between `θ` and the measurements added by `augment`.
///
/// `augment` adds the candidate's nuisance blocks and factors to a copy of
/// `base`; only Jacobians and weights matter, not residual values. New
/// nuisance blocks are eliminated before the determinant is taken.
pub fn mutual_information(
    base: &Problem,
    theta: &[BlockId],
    candidate: usize,
    augment: impl FnOnce(&mut Problem) -> Result<(), SolverError>,
) -> Result<InfoScore, InfoError> {
    let before = marginal_information(base, theta)?;
    score_against(&before, base, theta, candidate, augment)
}

/// As [`mutual_information`] with a precomputed baseline for `base`.
pub fn score_against(
    before: &MarginalInformation,
    base: &Problem,
    theta: &[BlockId],
    candidate: usize,
    augment: impl FnOnce(&mut Problem) -> Result<(), SolverError>,
) -> Result<InfoScore, InfoError> {
    let mut p = base.clone();
    augment(&mut p)?;
    let after = marginal_information(&p, theta)?;
    Ok(InfoScore {
        candidate,
        mutual_info: 0.5 * (after.log_det - before.log_det),
        logdet_before: -before.log_det,
        logdet_after: -after.log_det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn entropy_examples() {
        let e = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert_relative_eq!(shannon_entropy(&DMatrix::identity(3, 3)).unwrap(), 1.5 * e, epsilon = 1e-14);
        let h = shannon_entropy(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_relative_eq!(h, 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 4.0).ln(), epsilon = 1e-14);
        assert!((h - 2.112).abs() < 1e-3);
        let c = 0.3;
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let drop = shannon_entropy(&s).unwrap() - shannon_entropy(&(&s * c)).unwrap();
        assert_relative_eq!(drop, (1.0 / c).ln(), epsilon = 1e-12);
        assert!(matches!(
            shannon_entropy(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
            Err(InfoError::NotPositiveDefinite)
        ));
    }
}

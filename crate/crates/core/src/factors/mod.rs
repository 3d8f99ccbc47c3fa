//! Residual blocks.

mod imu_factor;
mod reprojection;

use nalgebra::{DMatrix, DVector};

use crate::solver::{BlockId, BlockKind, Evaluation, Factor, FactorError};

pub use imu_factor::{sqrt_information, ImuFactor, RELINEARIZE_BIAS};
pub use reprojection::{CameraReprojection, ViReprojection};

/// Gaussian prior `r = L (x ⊟ μ)` on a single block.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    block: [BlockId; 1],
    kind: BlockKind,
    mean: Vec<f64>,
    sqrt_info: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(block: BlockId, kind: BlockKind, mean: Vec<f64>, sqrt_info: DMatrix<f64>) -> Self {
        assert_eq!(sqrt_info.ncols(), kind.tangent_dim());
        Self {
            block: [block],
            kind,
            mean,
            sqrt_info,
        }
    }

    /// Independent prior with per-dimension standard deviations.
    pub fn isotropic(block: BlockId, kind: BlockKind, mean: Vec<f64>, sigmas: &[f64]) -> Self {
        let l = DMatrix::from_diagonal(&DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| 1.0 / s)));
        Self::new(block, kind, mean, l)
    }
}

impl Factor for GaussianPrior {
    fn blocks(&self) -> &[BlockId] {
        &self.block
    }

    fn residual_dim(&self) -> usize {
        self.sqrt_info.nrows()
    }

    fn evaluate(&self, params: &[&[f64]], want: &[bool]) -> Result<Evaluation, FactorError> {
        let d = DVector::from_vec(self.kind.minus(params[0], &self.mean));
        let residual = &self.sqrt_info * d;
        let jacobians = vec![want[0].then(|| &self.sqrt_info * self.kind.minus_jacobian(params[0], &self.mean))];
        Ok(Evaluation { residual, jacobians })
    }
}

/// Linear residual `r = Σ_k A_k x_k − c` over Euclidean blocks.
#[derive(Debug, Clone)]
pub struct LinearFactor {
    blocks: Vec<BlockId>,
    a: Vec<DMatrix<f64>>,
    c: DVector<f64>,
}

impl LinearFactor {
    pub fn new(terms: Vec<(BlockId, DMatrix<f64>)>, c: DVector<f64>) -> Self {
        assert!(terms.iter().all(|(_, a)| a.nrows() == c.len()));
        let (blocks, a) = terms.into_iter().unzip();
        Self { blocks, a, c }
    }
}

impl Factor for LinearFactor {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        self.c.len()
    }

    fn evaluate(&self, params: &[&[f64]], want: &[bool]) -> Result<Evaluation, FactorError> {
        let mut residual = -self.c.clone();
        for (a, x) in self.a.iter().zip(params) {
            residual += a * DVector::from_column_slice(x);
        }
        let jacobians = self.a.iter().zip(want).map(|(a, w)| w.then(|| a.clone())).collect();
        Ok(Evaluation { residual, jacobians })
    }
}

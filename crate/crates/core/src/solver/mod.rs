//! Nonlinear least squares over manifold parameter blocks.
//!
//! A [`Problem`] owns parameter blocks and residual blocks ([`Factor`]s).
//! Factors return whitened residuals and Jacobians w.r.t. each block's tangent
//! space. Blocks can be fixed entirely or partially through a tangent mask;
//! only active tangent directions become columns of the normal equations.

mod covariance;
mod lm;
mod marginalize;
pub mod sparse;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{so3_left_jacobian_inv, Quat};
use crate::imu::ImuError;
use sparse::{BlockSymmetric, CholeskyFactor, FactorizeError};

/// A factor with its evaluation, `None` when it is excluded.
type Evaluated<'a> = (&'a Arc<dyn Factor>, Option<Evaluation>);

pub use covariance::{marginal_covariance, marginal_information, MarginalInformation};
pub use lm::{solve, SolveReport, SolverOptions, Termination};
pub use marginalize::{marginalize, MarginalPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u32);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorId(pub u64);

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("unknown parameter block {0}")]
    UnknownBlock(BlockId),
    #[error("block {block}: {reason}")]
    InvalidBlock { block: BlockId, reason: String },
    #[error("factor has {got} parameter slices, expected {expected}")]
    FactorShape { expected: usize, got: usize },
    #[error("information matrix is rank deficient (block {block}, scaled pivot {pivot:e})")]
    RankDeficient { block: BlockId, pivot: f64 },
    #[error("block to marginalize has singular information (block {0})")]
    SingularBlock(BlockId),
    #[error("problem has no free parameters")]
    NoFreeBlocks,
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Imu(#[from] ImuError),
}

/// Why a factor could not be evaluated.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    /// The factor is skipped for this evaluation (e.g. point behind the camera).
    #[error("factor excluded: {0}")]
    Excluded(String),
    #[error(transparent)]
    Imu(#[from] ImuError),
}

/// Manifold type of a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// `[t, q(xyzw)]`, tangent `[δp, δα]`.
    Pose,
    /// `[p, q(xyzw), v, b_g, b_a]`, tangent `[δp, δα, δv, δb_g, δb_a]`.
    SensorState,
    Euclidean(usize),
}

fn quat_at(x: &[f64], o: usize) -> Quat {
    Quat::from_xyzw([x[o], x[o + 1], x[o + 2], x[o + 3]])
}

impl BlockKind {
    pub fn param_dim(&self) -> usize {
        match self {
            Self::Pose => 7,
            Self::SensorState => 16,
            Self::Euclidean(n) => *n,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            Self::Pose => 6,
            Self::SensorState => 15,
            Self::Euclidean(n) => *n,
        }
    }

    /// Offset of the quaternion in the parameters and of `δα` in the tangent.
    fn rotation_slot(&self) -> Option<(usize, usize)> {
        match self {
            Self::Pose => Some((3, 3)),
            Self::SensorState => Some((3, 3)),
            Self::Euclidean(_) => None,
        }
    }

    /// `x ⊞ δ`.
    pub fn plus(&self, x: &[f64], d: &[f64]) -> Vec<f64> {
        match self.rotation_slot() {
            None => x.iter().zip(d).map(|(a, b)| a + b).collect(),
            Some((qo, ro)) => {
                let mut out = Vec::with_capacity(x.len());
                out.extend(x[..qo].iter().zip(&d[..ro]).map(|(a, b)| a + b));
                let q = quat_at(x, qo).boxplus(&Vector3::new(d[ro], d[ro + 1], d[ro + 2]));
                out.extend_from_slice(&q.to_xyzw());
                out.extend(x[qo + 4..].iter().zip(&d[ro + 3..]).map(|(a, b)| a + b));
                out
            }
        }
    }

    /// `x ⊟ x0`.
    pub fn minus(&self, x: &[f64], x0: &[f64]) -> Vec<f64> {
        match self.rotation_slot() {
            None => x.iter().zip(x0).map(|(a, b)| a - b).collect(),
            Some((qo, _)) => {
                let mut out = Vec::with_capacity(self.tangent_dim());
                out.extend(x[..qo].iter().zip(&x0[..qo]).map(|(a, b)| a - b));
                let da = quat_at(x, qo).boxminus(&quat_at(x0, qo));
                out.extend_from_slice(da.as_slice());
                out.extend(x[qo + 4..].iter().zip(&x0[qo + 4..]).map(|(a, b)| a - b));
                out
            }
        }
    }

    /// `∂((x ⊞ δ) ⊟ x0)/∂δ` at `δ = 0`.
    pub fn minus_jacobian(&self, x: &[f64], x0: &[f64]) -> DMatrix<f64> {
        let n = self.tangent_dim();
        let mut j = DMatrix::identity(n, n);
        if let Some((qo, ro)) = self.rotation_slot() {
            // Log(Exp(δ) q q0⁻¹) ≈ φ + J_l⁻¹(φ) δ
            let phi = quat_at(x, qo).boxminus(&quat_at(x0, qo));
            j.fixed_view_mut::<3, 3>(ro, ro).copy_from(&so3_left_jacobian_inv(&phi));
        }
        j
    }
}

/// A residual block.
pub trait Factor: Send + Sync + fmt::Debug {
    fn blocks(&self) -> &[BlockId];
    fn residual_dim(&self) -> usize;
    /// Whitened residual and, for each block with `want[k]`, the Jacobian
    /// w.r.t. that block's full tangent space.
    fn evaluate(&self, params: &[&[f64]], want: &[bool]) -> Result<Evaluation, FactorError>;
    /// Cauchy loss scale applied to the squared whitened residual.
    fn loss_scale(&self) -> Option<f64> {
        None
    }
    /// Pixel standard deviation for reprojection factors (RMSE reporting).
    fn pixel_sigma(&self) -> Option<f64> {
        None
    }
    /// A copy that shares no interior mutable state with `self`, for factors
    /// that cache linearization data.
    fn detached(&self) -> Option<Arc<dyn Factor>> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub residual: DVector<f64>,
    pub jacobians: Vec<Option<DMatrix<f64>>>,
}

/// Cauchy loss `ρ(s) = c² ln(1 + s/c²)` and its IRLS weight `ρ'(s)`.
pub fn cauchy(s: f64, c: f64) -> (f64, f64) {
    let c2 = c * c;
    (c2 * (s / c2).ln_1p(), 1.0 / (1.0 + s / c2))
}

#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub kind: BlockKind,
    pub values: Vec<f64>,
    /// Active tangent directions; inactive ones are held constant.
    pub mask: Vec<bool>,
    /// Elimination group: lower groups are eliminated first.
    pub group: i32,
}

impl ParamBlock {
    pub fn is_fixed(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn active_dims(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Problem {
    blocks: BTreeMap<BlockId, ParamBlock>,
    factors: BTreeMap<FactorId, Arc<dyn Factor>>,
    next_block: u32,
    next_factor: u64,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, kind: BlockKind, values: Vec<f64>, group: i32) -> BlockId {
        assert_eq!(values.len(), kind.param_dim(), "parameter size mismatch for {kind:?}");
        let id = BlockId(self.next_block);
        self.next_block += 1;
        self.blocks.insert(
            id,
            ParamBlock {
                kind,
                mask: vec![true; kind.tangent_dim()],
                values,
                group,
            },
        );
        id
    }

    pub fn block(&self, id: BlockId) -> Result<&ParamBlock, SolverError> {
        self.blocks.get(&id).ok_or(SolverError::UnknownBlock(id))
    }

    fn block_mut(&mut self, id: BlockId) -> Result<&mut ParamBlock, SolverError> {
        self.blocks.get_mut(&id).ok_or(SolverError::UnknownBlock(id))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (BlockId, &ParamBlock)> {
        self.blocks.iter().map(|(k, v)| (*k, v))
    }

    pub fn values(&self, id: BlockId) -> Result<&[f64], SolverError> {
        Ok(&self.block(id)?.values)
    }

    pub fn set_values(&mut self, id: BlockId, values: Vec<f64>) -> Result<(), SolverError> {
        let b = self.block_mut(id)?;
        if values.len() != b.kind.param_dim() {
            return Err(SolverError::InvalidBlock {
                block: id,
                reason: "parameter size mismatch".into(),
            });
        }
        b.values = values;
        Ok(())
    }

    pub fn set_fixed(&mut self, id: BlockId, fixed: bool) -> Result<(), SolverError> {
        let b = self.block_mut(id)?;
        b.mask.iter_mut().for_each(|m| *m = !fixed);
        Ok(())
    }

    pub fn set_mask(&mut self, id: BlockId, mask: Vec<bool>) -> Result<(), SolverError> {
        let b = self.block_mut(id)?;
        if mask.len() != b.kind.tangent_dim() {
            return Err(SolverError::InvalidBlock {
                block: id,
                reason: "mask size mismatch".into(),
            });
        }
        b.mask = mask;
        Ok(())
    }

    pub fn set_group(&mut self, id: BlockId, group: i32) -> Result<(), SolverError> {
        self.block_mut(id)?.group = group;
        Ok(())
    }

    pub fn add_factor(&mut self, factor: Arc<dyn Factor>) -> Result<FactorId, SolverError> {
        for b in factor.blocks() {
            self.block(*b)?;
        }
        let id = FactorId(self.next_factor);
        self.next_factor += 1;
        self.factors.insert(id, factor);
        Ok(id)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Option<Arc<dyn Factor>> {
        self.factors.remove(&id)
    }

    pub fn factors(&self) -> impl Iterator<Item = (FactorId, &Arc<dyn Factor>)> {
        self.factors.iter().map(|(k, v)| (*k, v))
    }

    /// Clone whose factors share no caches with `self`, so evaluating it on
    /// another thread cannot change results here (or vice versa).
    pub fn detached(&self) -> Problem {
        let mut out = self.clone();
        for f in out.factors.values_mut() {
            if let Some(d) = f.detached() {
                *f = d;
            }
        }
        out
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Removes a block that no factor references.
    pub fn remove_block(&mut self, id: BlockId) -> Result<ParamBlock, SolverError> {
        if self.factors.values().any(|f| f.blocks().contains(&id)) {
            return Err(SolverError::InvalidBlock {
                block: id,
                reason: "block is still referenced".into(),
            });
        }
        self.blocks.remove(&id).ok_or(SolverError::UnknownBlock(id))
    }

    /// Free blocks in elimination order: by group, then `last` in the given order.
    pub(crate) fn layout(&self, last: &[BlockId]) -> Layout {
        let last_set: BTreeSet<BlockId> = last.iter().copied().collect();
        let mut order: Vec<(i32, BlockId)> = self
            .blocks
            .iter()
            .filter(|(id, b)| !b.is_fixed() && !last_set.contains(id))
            .map(|(id, b)| (b.group, *id))
            .collect();
        order.sort();
        let mut ids: Vec<BlockId> = order.into_iter().map(|(_, id)| id).collect();
        ids.extend(last.iter().filter(|id| self.blocks.get(id).is_some_and(|b| !b.is_fixed())));
        Layout::new(self, ids)
    }

    /// Applies a step over the active tangent directions of `layout`.
    pub(crate) fn retract(&self, layout: &Layout, step: &DVector<f64>) -> Problem {
        let mut out = self.clone();
        for (k, id) in layout.order.iter().enumerate() {
            let b = out.blocks.get_mut(id).expect("layout block exists");
            let mut d = vec![0.0; b.kind.tangent_dim()];
            for (c, &dim) in layout.dims[k].iter().enumerate() {
                d[dim] = step[layout.offsets[k] + c];
            }
            b.values = b.kind.plus(&b.values, &d);
        }
        out
    }

    fn evaluate_factor(&self, f: &dyn Factor, want_jac: bool) -> Result<Option<Evaluation>, SolverError> {
        let params: Vec<&[f64]> = f
            .blocks()
            .iter()
            .map(|b| self.blocks[b].values.as_slice())
            .collect();
        let want: Vec<bool> = f
            .blocks()
            .iter()
            .map(|b| want_jac && !self.blocks[b].is_fixed())
            .collect();
        match f.evaluate(&params, &want) {
            Ok(e) => Ok(Some(e)),
            Err(FactorError::Excluded(_)) => Ok(None),
            Err(FactorError::Imu(e)) => Err(e.into()),
        }
    }

    /// Evaluates all factors in parallel, returned in factor order.
    fn evaluate_all(&self, want_jac: bool) -> Result<Vec<Evaluated<'_>>, SolverError> {
        let factors: Vec<&Arc<dyn Factor>> = self.factors.values().collect();
        factors
            .into_par_iter()
            .map(|f| Ok((f, self.evaluate_factor(f.as_ref(), want_jac)?)))
            .collect()
    }

    /// Robustified cost `½ Σ ρ(‖r‖²)`.
    pub fn cost(&self) -> Result<f64, SolverError> {
        Ok(self
            .evaluate_all(false)?
            .iter()
            .filter_map(|(f, e)| e.as_ref().map(|e| robust_cost(f.as_ref(), &e.residual).0))
            .sum())
    }

    /// Per-coordinate RMSE of reprojection factors in pixels.
    pub fn reprojection_rmse(&self) -> Result<Option<f64>, SolverError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (f, e) in self.evaluate_all(false)? {
            if let (Some(sigma), Some(e)) = (f.pixel_sigma(), e) {
                sum += e.residual.norm_squared() * sigma * sigma;
                n += e.residual.len();
            }
        }
        Ok((n > 0).then(|| (sum / n as f64).sqrt()))
    }

    /// Normal equations `H δ = b` (with `b = −Jᵀr`) over the free blocks.
    pub(crate) fn linearize(&self, layout: &Layout, robust: bool) -> Result<Linearization, SolverError> {
        let evals = self.evaluate_all(true)?;
        let mut h = BlockSymmetric::new(layout.dims.iter().map(Vec::len).collect());
        let mut b = DVector::zeros(layout.total);
        let mut cost = 0.0;
        for (f, e) in &evals {
            let Some(e) = e else { continue };
            let (c, w) = if robust {
                robust_cost(f.as_ref(), &e.residual)
            } else {
                (0.5 * e.residual.norm_squared(), 1.0)
            };
            cost += c;
            let cols: Vec<(usize, DMatrix<f64>)> = f
                .blocks()
                .iter()
                .zip(&e.jacobians)
                .filter_map(|(bid, j)| {
                    let k = *layout.index.get(bid)?;
                    let j = j.as_ref()?;
                    Some((k, j.select_columns(layout.dims[k].iter())))
                })
                .collect();
            for (a, (ka, ja)) in cols.iter().enumerate() {
                let jta = ja.transpose() * w;
                let mut seg = b.rows_mut(layout.offsets[*ka], ja.ncols());
                seg -= &jta * &e.residual;
                for (kb, jb) in &cols[..=a] {
                    h.add(*ka, *kb, &(&jta * jb));
                }
            }
        }
        Ok(Linearization { h, b, cost })
    }

    /// Ids of factors that reference any of `ids`.
    pub(crate) fn factors_touching(&self, ids: &BTreeSet<BlockId>) -> Vec<FactorId> {
        self.factors
            .iter()
            .filter(|(_, f)| f.blocks().iter().any(|b| ids.contains(b)))
            .map(|(id, _)| *id)
            .collect()
    }
}

fn robust_cost(f: &dyn Factor, r: &DVector<f64>) -> (f64, f64) {
    let s = r.norm_squared();
    match f.loss_scale() {
        Some(c) => {
            let (rho, w) = cauchy(s, c);
            (0.5 * rho, w)
        }
        None => (0.5 * s, 1.0),
    }
}

/// Column layout of the free blocks.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub order: Vec<BlockId>,
    pub index: HashMap<BlockId, usize>,
    /// Active tangent dimensions per ordered block.
    pub dims: Vec<Vec<usize>>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl Layout {
    fn new(problem: &Problem, order: Vec<BlockId>) -> Self {
        let dims: Vec<Vec<usize>> = order.iter().map(|id| problem.blocks[id].active_dims()).collect();
        let mut offsets = Vec::with_capacity(order.len());
        let mut total = 0;
        for d in &dims {
            offsets.push(total);
            total += d.len();
        }
        let index = order.iter().enumerate().map(|(k, id)| (*id, k)).collect();
        Self {
            order,
            index,
            dims,
            offsets,
            total,
        }
    }

    /// Number of columns of the trailing blocks `ids` (must be last in order).
    pub fn trailing_cols(&self, ids: &[BlockId]) -> usize {
        ids.iter()
            .filter_map(|id| self.index.get(id))
            .map(|&k| self.dims[k].len())
            .sum()
    }
}

pub(crate) struct Linearization {
    pub h: BlockSymmetric,
    pub b: DVector<f64>,
    pub cost: f64,
}

/// Factorization of the Jacobi-scaled information matrix.
pub(crate) struct ScaledFactor {
    pub factor: CholeskyFactor,
    pub scale: DVector<f64>,
}

impl ScaledFactor {
    pub fn new(
        h: &BlockSymmetric,
        layout: &Layout,
        dense_limit: usize,
        pivot_tol: f64,
    ) -> Result<Self, SolverError> {
        let diag = h.diagonal();
        let mut scale = DVector::zeros(diag.len());
        for (k, d) in diag.iter().enumerate() {
            if !(*d > 0.0) {
                let block = layout.offsets.partition_point(|&o| o <= k) - 1;
                return Err(SolverError::RankDeficient {
                    block: layout.order[block],
                    pivot: 0.0,
                });
            }
            scale[k] = 1.0 / d.sqrt();
        }
        let factor = CholeskyFactor::new(&h.scaled(&scale), dense_limit, pivot_tol).map_err(|e| match e {
            FactorizeError::NotPositiveDefinite { block, pivot } => SolverError::RankDeficient {
                block: layout.order[block],
                pivot,
            },
        })?;
        Ok(Self { factor, scale })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let sb = b.component_mul(&self.scale);
        self.factor.solve(&sb).component_mul(&self.scale)
    }

    /// Marginal information of the trailing `k` columns and its log-determinant.
    pub fn trailing_information(&self, k: usize) -> (DMatrix<f64>, f64) {
        let n = self.scale.len();
        let l = self.factor.trailing(k);
        let s = self.scale.rows(n - k, k);
        // H = S⁻¹ (L Lᵀ) S⁻¹ on the scaled factor
        let mut lh = l.clone();
        for r in 0..k {
            lh.row_mut(r).scale_mut(1.0 / s[r]);
        }
        let info = &lh * lh.transpose();
        let logdet = 2.0 * (0..k).map(|i| l[(i, i)].ln() - s[i].ln()).sum::<f64>();
        (info, logdet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifold_plus_minus_roundtrip() {
        let x = vec![0.1, -0.2, 0.3, 0.0, 0.0, (0.2f64).sin(), (0.2f64).cos()];
        let d = vec![1e-2, 2e-2, -3e-2, 1e-3, -2e-3, 4e-2];
        let y = BlockKind::Pose.plus(&x, &d);
        let back = BlockKind::Pose.minus(&y, &x);
        for (a, b) in back.iter().zip(&d) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn minus_jacobian_matches_finite_differences() {
        let x0 = BlockKind::Pose.plus(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], &[0.0, 0.0, 0.0, 0.3, -0.2, 0.1]);
        let x = BlockKind::Pose.plus(&x0, &[0.1, 0.2, 0.3, 0.4, 0.5, -0.6]);
        let j = BlockKind::Pose.minus_jacobian(&x, &x0);
        let h = 1e-6;
        for c in 0..6 {
            let mut d = vec![0.0; 6];
            d[c] = h;
            let p = BlockKind::Pose.minus(&BlockKind::Pose.plus(&x, &d), &x0);
            d[c] = -h;
            let m = BlockKind::Pose.minus(&BlockKind::Pose.plus(&x, &d), &x0);
            for r in 0..6 {
                let fd = (p[r] - m[r]) / (2.0 * h);
                assert!((fd - j[(r, c)]).abs() < 1e-8, "({r},{c}) {fd} vs {}", j[(r, c)]);
            }
        }
    }

    #[test]
    fn cauchy_weight_is_loss_derivative() {
        let c = 1.5;
        for s in [0.0, 0.3, 2.0, 40.0] {
            let h = 1e-6;
            let fd = (cauchy(s + h, c).0 - cauchy((s - h).max(0.0), c).0) / (s + h - (s - h).max(0.0));
            assert!((fd - cauchy(s, c).1).abs() < 1e-6);
        }
    }
}

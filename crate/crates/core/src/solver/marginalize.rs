//! Schur-complement marginalization into a linearized prior factor.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{BlockId, BlockKind, Evaluation, Factor, FactorError, Problem, SolverError};

/// Gaussian prior left behind by marginalization.
///
/// Stores the Schur complement `H*` and information vector `b*` at the
/// linearization point `x0` of the remaining blocks, and evaluates as the
/// residual `r = r0 + J (x ⊟ x0)` with `JᵀJ = H*` and `Jᵀr0 = −b*`.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    blocks: Vec<BlockId>,
    kinds: Vec<BlockKind>,
    x0: Vec<Vec<f64>>,
    /// Column offsets of each block's full tangent space.
    offsets: Vec<usize>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    jacobian: DMatrix<f64>,
    r0: DVector<f64>,
}

impl MarginalPrior {
    /// Builds the prior from `(H*, b*)` over the full tangent spaces of `blocks`.
    pub fn new(blocks: Vec<BlockId>, kinds: Vec<BlockKind>, x0: Vec<Vec<f64>>, h: DMatrix<f64>, b: DVector<f64>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut n = 0;
        for k in &kinds {
            offsets.push(n);
            n += k.tangent_dim();
        }
        assert_eq!(h.nrows(), n);
        let hs = (&h + h.transpose()) * 0.5;
        let eig = hs.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-12 * max.max(1e-300)).collect();
        let mut jacobian = DMatrix::zeros(keep.len(), n);
        let mut r0 = DVector::zeros(keep.len());
        for (row, &i) in keep.iter().enumerate() {
            let l = eig.eigenvalues[i];
            let v = eig.eigenvectors.column(i);
            jacobian.row_mut(row).copy_from(&(v.transpose() * l.sqrt()));
            r0[row] = -v.dot(&b) / l.sqrt();
        }
        Self {
            blocks,
            kinds,
            x0,
            offsets,
            h: hs,
            b,
            jacobian,
            r0,
        }
    }

    pub fn linearization_point(&self) -> &[Vec<f64>] {
        &self.x0
    }
}

impl Factor for MarginalPrior {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        self.r0.len()
    }

    fn evaluate(&self, params: &[&[f64]], want: &[bool]) -> Result<Evaluation, FactorError> {
        let n = self.jacobian.ncols();
        let mut delta = DVector::zeros(n);
        for (k, kind) in self.kinds.iter().enumerate() {
            let d = kind.minus(params[k], &self.x0[k]);
            delta.rows_mut(self.offsets[k], d.len()).copy_from_slice(&d);
        }
        let residual = &self.r0 + &self.jacobian * delta;
        let jacobians = self
            .kinds
            .iter()
            .enumerate()
            .map(|(k, kind)| {
                want[k].then(|| {
                    let cols = self.jacobian.columns(self.offsets[k], kind.tangent_dim());
                    cols * kind.minus_jacobian(params[k], &self.x0[k])
                })
            })
            .collect();
        Ok(Evaluation { residual, jacobians })
    }
}

/// Marginalizes `ids` out of `problem`.
///
/// The factors touching `ids` are linearized at the current estimate and
/// replaced by a single [`MarginalPrior`] on the remaining free blocks they
/// touched. Blocks without factors are simply removed.
pub fn marginalize(problem: &mut Problem, ids: &[BlockId]) -> Result<(), SolverError> {
    for id in ids {
        if problem.block(*id)?.is_fixed() {
            return Err(SolverError::InvalidBlock {
                block: *id,
                reason: "cannot marginalize a fixed block".into(),
            });
        }
    }
    let marg: BTreeSet<BlockId> = ids.iter().copied().collect();
    let touching = problem.factors_touching(&marg);
    if touching.is_empty() {
        for id in ids {
            problem.remove_block(*id)?;
        }
        return Ok(());
    }

    // sub-problem with only the touching factors, marginalized blocks first
    let mut sub = Problem {
        blocks: problem.blocks.clone(),
        factors: touching.iter().map(|f| (*f, problem.factors[f].clone())).collect(),
        next_block: problem.next_block,
        next_factor: problem.next_factor,
    };
    let referenced: BTreeSet<BlockId> = sub.factors.values().flat_map(|f| f.blocks().to_vec()).collect();
    sub.blocks.retain(|id, _| referenced.contains(id));
    let remaining: Vec<BlockId> = referenced
        .iter()
        .filter(|id| !marg.contains(id) && !sub.blocks[id].is_fixed())
        .copied()
        .collect();
    for id in &marg {
        sub.set_group(*id, i32::MIN)?;
    }
    let layout = sub.layout(&remaining);
    let lin = sub.linearize(&layout, true)?;
    let h = lin.h.to_dense();
    let m = layout.total - layout.trailing_cols(&remaining);
    let r = layout.total - m;

    let hmm = h.view((0, 0), (m, m)).into_owned();
    let chol = hmm.cholesky().ok_or_else(|| SolverError::SingularBlock(ids[0]))?;
    let hmr = h.view((0, m), (m, r)).into_owned();
    let hrr = h.view((m, m), (r, r)).into_owned();
    let bm = lin.b.rows(0, m).into_owned();
    let br = lin.b.rows(m, r).into_owned();
    let h_star = hrr - hmr.transpose() * chol.solve(&hmr);
    let b_star = br - hmr.transpose() * chol.solve(&bm);

    for f in &touching {
        problem.remove_factor(*f);
    }
    for id in ids {
        problem.remove_block(*id)?;
    }
    if remaining.is_empty() {
        return Ok(());
    }

    // scatter active columns into full tangent spaces
    let kinds: Vec<BlockKind> = remaining.iter().map(|id| problem.blocks[id].kind).collect();
    let full: usize = kinds.iter().map(BlockKind::tangent_dim).sum();
    let mut map = Vec::with_capacity(r);
    let mut off = 0;
    for (id, kind) in remaining.iter().zip(&kinds) {
        let k = layout.index[id];
        map.extend(layout.dims[k].iter().map(|d| off + d));
        off += kind.tangent_dim();
    }
    let mut hf = DMatrix::zeros(full, full);
    let mut bf = DVector::zeros(full);
    for (a, &ia) in map.iter().enumerate() {
        bf[ia] = b_star[a];
        for (c, &ic) in map.iter().enumerate() {
            hf[(ia, ic)] = h_star[(a, c)];
        }
    }
    let x0 = remaining.iter().map(|id| problem.blocks[id].values.clone()).collect();
    let prior = MarginalPrior::new(remaining, kinds, x0, hf, bf);
    problem.add_factor(Arc::new(prior))?;
    Ok(())
}

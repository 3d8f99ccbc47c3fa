//! Symmetric block-sparse matrices and their Cholesky factorization.
//!
//! Blocks are eliminated in index order; fill-in is created on demand, so the
//! caller controls sparsity through the block ordering (nuisance blocks first,
//! densely connected blocks last).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

/// Lower triangle of a symmetric matrix partitioned into dense blocks.
#[derive(Debug, Clone)]
pub struct BlockSymmetric {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    /// `cols[j][i]` holds block `(i, j)` for `i >= j`.
    cols: Vec<BTreeMap<usize, DMatrix<f64>>>,
}

impl BlockSymmetric {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut acc = 0;
        for d in &dims {
            offsets.push(acc);
            acc += d;
        }
        offsets.push(acc);
        let cols = (0..dims.len()).map(|_| BTreeMap::new()).collect();
        Self { dims, offsets, cols }
    }

    pub fn block_count(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn block_dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Adds `m` to block `(i, j)`; for `i < j` the transpose is added to `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, m: &DMatrix<f64>) {
        if i >= j {
            let (di, dj) = (self.dims[i], self.dims[j]);
            *self.cols[j].entry(i).or_insert_with(|| DMatrix::zeros(di, dj)) += m;
        } else {
            self.add(j, i, &m.transpose());
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.cols[j].get(&i)
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        for (j, col) in self.cols.iter().enumerate() {
            if let Some(b) = col.get(&j) {
                for k in 0..self.dims[j] {
                    d[self.offsets[j] + k] = b[(k, k)];
                }
            }
        }
        d
    }

    /// Adds `v[k]` to the `k`-th diagonal entry.
    pub fn add_diagonal(&mut self, v: &DVector<f64>) {
        for j in 0..self.dims.len() {
            let dj = self.dims[j];
            let b = self.cols[j].entry(j).or_insert_with(|| DMatrix::zeros(dj, dj));
            for k in 0..dj {
                b[(k, k)] += v[self.offsets[j] + k];
            }
        }
    }

    /// Symmetric scaling `diag(s) · A · diag(s)`.
    pub fn scaled(&self, s: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (j, col) in out.cols.iter_mut().enumerate() {
            for (&i, b) in col.iter_mut() {
                for c in 0..b.ncols() {
                    for r in 0..b.nrows() {
                        b[(r, c)] *= s[self.offsets[i] + r] * s[self.offsets[j] + c];
                    }
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (j, col) in self.cols.iter().enumerate() {
            for (&i, b) in col {
                let (oi, oj) = (self.offsets[i], self.offsets[j]);
                m.view_mut((oi, oj), (b.nrows(), b.ncols())).copy_from(b);
                if i != j {
                    m.view_mut((oj, oi), (b.ncols(), b.nrows())).copy_from(&b.transpose());
                }
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        for (j, col) in self.cols.iter().enumerate() {
            let xj = x.rows(self.offsets[j], self.dims[j]);
            for (&i, b) in col {
                let xi = x.rows(self.offsets[i], self.dims[i]);
                let mut yi = y.rows_mut(self.offsets[i], self.dims[i]);
                yi += b * xj;
                if i != j {
                    let mut yj = y.rows_mut(self.offsets[j], self.dims[j]);
                    yj += b.transpose() * xi;
                }
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorizeError {
    /// Pivot block `block` is not positive definite (or its smallest pivot
    /// fell below the tolerance).
    NotPositiveDefinite { block: usize, pivot: f64 },
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub enum CholeskyFactor {
    Dense { l: DMatrix<f64>, dims: Vec<usize> },
    Sparse(BlockSymmetric),
}

/// Smallest squared pivot of a lower-triangular matrix.
fn min_pivot_sq(l: &DMatrix<f64>) -> f64 {
    (0..l.nrows()).map(|k| l[(k, k)] * l[(k, k)]).fold(f64::INFINITY, f64::min)
}

impl CholeskyFactor {
    /// Factorizes `a`, dense below `dense_limit` columns.
    ///
    /// Pivots whose square falls below `pivot_tol` are reported as failure;
    /// callers pass a Jacobi-scaled matrix so the tolerance is relative.
    pub fn new(a: &BlockSymmetric, dense_limit: usize, pivot_tol: f64) -> Result<Self, FactorizeError> {
        if a.dim() < dense_limit {
            Self::dense(a, pivot_tol)
        } else {
            Self::sparse(a, pivot_tol)
        }
    }

    pub fn dense(a: &BlockSymmetric, pivot_tol: f64) -> Result<Self, FactorizeError> {
        let m = a.to_dense();
        let l = m
            .cholesky()
            .ok_or(FactorizeError::NotPositiveDefinite { block: 0, pivot: 0.0 })?
            .l();
        for j in 0..a.block_count() {
            let o = a.offset(j);
            let d = a.block_dim(j);
            let p = min_pivot_sq(&l.view((o, o), (d, d)).into_owned());
            if !(p > pivot_tol) {
                return Err(FactorizeError::NotPositiveDefinite { block: j, pivot: p });
            }
        }
        Ok(Self::Dense {
            l,
            dims: a.dims.clone(),
        })
    }

    pub fn sparse(a: &BlockSymmetric, pivot_tol: f64) -> Result<Self, FactorizeError> {
        let mut l = a.clone();
        let n = l.block_count();
        for j in 0..n {
            let col = std::mem::take(&mut l.cols[j]);
            let dj = l.dims[j];
            let diag = col.get(&j).cloned().unwrap_or_else(|| DMatrix::zeros(dj, dj));
            let ljj = diag
                .cholesky()
                .ok_or(FactorizeError::NotPositiveDefinite { block: j, pivot: 0.0 })?
                .l();
            let p = min_pivot_sq(&ljj);
            if !(p > pivot_tol) {
                return Err(FactorizeError::NotPositiveDefinite { block: j, pivot: p });
            }
            // L_ij = A_ij L_jj⁻ᵀ, computed as (L_jj⁻¹ A_ijᵀ)ᵀ
            let mut new_col = BTreeMap::new();
            for (&i, aij) in col.range(j + 1..) {
                let x = ljj
                    .solve_lower_triangular(&aij.transpose())
                    .expect("nonsingular triangular factor");
                new_col.insert(i, x.transpose());
            }
            // Schur update of the trailing blocks
            let rows: Vec<usize> = new_col.keys().copied().collect();
            for (a_idx, &k) in rows.iter().enumerate() {
                let lkj = &new_col[&k];
                for &i in &rows[a_idx..] {
                    let lij = &new_col[&i];
                    let upd = lij * lkj.transpose();
                    let (di, dk) = (l.dims[i], l.dims[k]);
                    *l.cols[k].entry(i).or_insert_with(|| DMatrix::zeros(di, dk)) -= upd;
                }
            }
            new_col.insert(j, ljj);
            l.cols[j] = new_col;
        }
        Ok(Self::Sparse(l))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Dense { l, .. } => l.nrows(),
            Self::Sparse(l) => l.dim(),
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Dense { l, .. } => {
                let y = l.solve_lower_triangular(b).expect("nonsingular");
                l.transpose().solve_upper_triangular(&y).expect("nonsingular")
            }
            Self::Sparse(l) => {
                let n = l.block_count();
                let mut y = b.clone();
                for j in 0..n {
                    let (oj, dj) = (l.offsets[j], l.dims[j]);
                    let yj = l.cols[j][&j]
                        .solve_lower_triangular(&y.rows(oj, dj).into_owned())
                        .expect("nonsingular");
                    y.rows_mut(oj, dj).copy_from(&yj);
                    for (&i, lij) in l.cols[j].range(j + 1..) {
                        let upd = lij * &yj;
                        let mut yi = y.rows_mut(l.offsets[i], l.dims[i]);
                        yi -= upd;
                    }
                }
                let mut x = y;
                for j in (0..n).rev() {
                    let (oj, dj) = (l.offsets[j], l.dims[j]);
                    let mut rhs = x.rows(oj, dj).into_owned();
                    for (&i, lij) in l.cols[j].range(j + 1..) {
                        rhs -= lij.transpose() * x.rows(l.offsets[i], l.dims[i]);
                    }
                    let xj = l.cols[j][&j]
                        .transpose()
                        .solve_upper_triangular(&rhs)
                        .expect("nonsingular");
                    x.rows_mut(oj, dj).copy_from(&xj);
                }
                x
            }
        }
    }

    /// Dense trailing `k × k` block of `L`. For `A` ordered `[other, θ]`
    /// this satisfies `L_θθ L_θθᵀ = A_θθ − A_θo A_oo⁻¹ A_oθ`.
    pub fn trailing(&self, k: usize) -> DMatrix<f64> {
        let n = self.dim();
        assert!(k <= n);
        match self {
            Self::Dense { l, .. } => l.view((n - k, n - k), (k, k)).into_owned(),
            Self::Sparse(l) => {
                let mut out = DMatrix::zeros(k, k);
                let start = n - k;
                for (j, col) in l.cols.iter().enumerate() {
                    if l.offsets[j] + l.dims[j] <= start {
                        continue;
                    }
                    assert!(l.offsets[j] >= start, "trailing size must align with blocks");
                    for (&i, b) in col {
                        out.view_mut((l.offsets[i] - start, l.offsets[j] - start), (b.nrows(), b.ncols()))
                            .copy_from(b);
                    }
                }
                out
            }
        }
    }

    /// `log det A = 2 Σ log L_kk`.
    pub fn log_det(&self) -> f64 {
        let l = self.trailing(self.dim());
        2.0 * (0..l.nrows()).map(|k| l[(k, k)].ln()).sum::<f64>()
    }
}

//! Linear problems with a dense closed-form oracle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vical::factors::LinearFactor;
use vical::info::{mutual_information, InfoScore};
use vical::solver::{marginalize, solve, BlockId, BlockKind, Problem, SolverOptions};

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// One residual row block: `(block, Jacobian)` terms and the constant.
type Row = (Vec<(usize, DMatrix<f64>)>, DVector<f64>);

/// Dense stacked system `(J, r0)` of a linear problem built from terms.
pub struct DenseOracle {
    rows: Vec<Row>,
    pub offsets: Vec<usize>,
    pub n: usize,
}

impl DenseOracle {
    pub fn new(dims: &[usize]) -> Self {
        let mut offsets = Vec::new();
        let mut n = 0;
        for d in dims {
            offsets.push(n);
            n += d;
        }
        Self {
            rows: Vec::new(),
            offsets,
            n,
        }
    }

    pub fn push(&mut self, terms: Vec<(usize, DMatrix<f64>)>, c: DVector<f64>) {
        self.rows.push((terms, c));
    }

    pub fn system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let m: usize = self.rows.iter().map(|(_, c)| c.len()).sum();
        let mut j = DMatrix::zeros(m, self.n);
        let mut c = DVector::zeros(m);
        let mut row = 0;
        for (terms, cc) in &self.rows {
            for (b, a) in terms {
                j.view_mut((row, self.offsets[*b]), (a.nrows(), a.ncols())).copy_from(a);
            }
            c.rows_mut(row, cc.len()).copy_from(cc);
            row += cc.len();
        }
        (j, c)
    }

    pub fn solution(&self) -> DVector<f64> {
        let (j, c) = self.system();
        j.svd(true, true).solve(&c, 0.0).unwrap()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let (j, _) = self.system();
        (j.transpose() * &j).try_inverse().unwrap()
    }
}

/// Random sparse linear problem mirrored into a `Problem` and a dense oracle.
pub fn random_linear(seed: u64, nblocks: usize) -> (Problem, Vec<BlockId>, DenseOracle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: Vec<usize> = (0..nblocks).map(|k| 1 + (k % 3)).collect();
    let mut p = Problem::new();
    let ids: Vec<BlockId> = dims
        .iter()
        .enumerate()
        .map(|(k, d)| p.add_block(BlockKind::Euclidean(*d), vec![0.0; *d], k as i32))
        .collect();
    let mut oracle = DenseOracle::new(&dims);
    for k in 0..nblocks {
        // unary term on every block and a pairwise term to a random other block
        let a = rand_mat(&mut rng, dims[k] + 1, dims[k]);
        let c = rand_vec(&mut rng, dims[k] + 1);
        p.add_factor(Arc::new(LinearFactor::new(vec![(ids[k], a.clone())], c.clone())))
            .unwrap();
        oracle.push(vec![(k, a)], c);
        let other = rng.gen_range(0..nblocks);
        if other != k {
            let a1 = rand_mat(&mut rng, 2, dims[k]);
            let a2 = rand_mat(&mut rng, 2, dims[other]);
            let c = rand_vec(&mut rng, 2);
            p.add_factor(Arc::new(LinearFactor::new(
                vec![(ids[k], a1.clone()), (ids[other], a2.clone())],
                c.clone(),
            )))
            .unwrap();
            oracle.push(vec![(k, a1), (other, a2)], c);
        }
    }
    (p, ids, oracle)
}

/// Stopping rules tight enough to reach the closed-form solution.
pub fn exact() -> SolverOptions {
    SolverOptions {
        gradient_tolerance: 1e-14,
        relative_cost_tolerance: 0.0,
        ..Default::default()
    }
}

pub fn stacked_values(p: &Problem, ids: &[BlockId]) -> DVector<f64> {
    let v: Vec<f64> = ids.iter().flat_map(|id| p.values(*id).unwrap().to_vec()).collect();
    DVector::from_vec(v)
}

/// Linear chain: states x_k ∈ R³ with odometry, shared θ ∈ R², window `w`.
/// Largest deviation of the fixed-lag estimate from the full batch.
pub fn fixed_lag_error(window: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(window as u64);
    let steps = 25;
    let mut online = Problem::new();
    let theta = online.add_block(BlockKind::Euclidean(2), vec![0.0; 2], 100);
    let mut dims = vec![2];
    dims.extend(std::iter::repeat_n(3, steps));
    let mut oracle = DenseOracle::new(&dims);
    let mut states: Vec<BlockId> = Vec::new();
    let opts = exact();
    for k in 0..steps {
        let x = online.add_block(BlockKind::Euclidean(3), vec![0.0; 3], k as i32);
        let a = rand_mat(&mut rng, 6, 3);
        let b = rand_mat(&mut rng, 6, 2);
        let c = rand_vec(&mut rng, 6);
        online
            .add_factor(Arc::new(LinearFactor::new(vec![(x, a.clone()), (theta, b.clone())], c.clone())))
            .unwrap();
        oracle.push(vec![(k + 1, a), (0, b)], c);
        if let Some(&prev) = states.last() {
            let o = DMatrix::identity(3, 3) * 2.0;
            let c = rand_vec(&mut rng, 3);
            online
                .add_factor(Arc::new(LinearFactor::new(vec![(x, o.clone()), (prev, -o.clone())], c.clone())))
                .unwrap();
            oracle.push(vec![(k + 1, o.clone()), (k, -o)], c);
        }
        states.push(x);
        if states.len() > window {
            let old = states.remove(0);
            marginalize(&mut online, &[old]).unwrap();
        }
        solve(&mut online, &opts).unwrap();
    }
    let batch = oracle.solution();
    let th = DVector::from_column_slice(online.values(theta).unwrap());
    let mut err = (th - batch.rows(0, 2)).amax();
    for (i, id) in states.iter().enumerate() {
        let k = steps - states.len() + i;
        let x = DVector::from_column_slice(online.values(*id).unwrap());
        err = err.max((x - batch.rows(oracle.offsets[k + 1], 3)).amax());
    }
    err
}

/// MI of a candidate through Schur elimination and by dense inversion of
/// the full covariance.
pub fn mi_schur_and_dense() -> (InfoScore, f64) {
    let (p, ids, oracle) = random_linear(21, 20);
    let theta = [ids[18], ids[19]];
    let idx: Vec<usize> = [18usize, 19]
        .iter()
        .flat_map(|&k| {
                let o = oracle.offsets[k];
                (0..(1 + k % 3)).map(move |d| o + d)
            })
        .collect();
    let sub = |m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])]);
    let before = sub(&oracle.covariance());

    // candidate: a new nuisance block linked to θ and an existing block
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let a_new = rand_mat(&mut rng, 4, 2);
    let a_th = rand_mat(&mut rng, 4, 2);
    let a_old = rand_mat(&mut rng, 4, 1);
    let mut aug = DenseOracle::new(&[oracle.n, 2]);
    let (j0, _) = oracle.system();
    let m0 = j0.nrows();
    let mut jbig = DMatrix::zeros(m0 + 4, oracle.n + 2);
    jbig.view_mut((0, 0), (m0, oracle.n)).copy_from(&j0);
    jbig.view_mut((m0, oracle.n), (4, 2)).copy_from(&a_new);
    jbig.view_mut((m0, oracle.offsets[19]), (4, 2)).copy_from(&a_th);
    jbig.view_mut((m0, oracle.offsets[0]), (4, 1)).copy_from(&a_old);
    aug.push(vec![(0, jbig.columns(0, oracle.n).into_owned()), (1, jbig.columns(oracle.n, 2).into_owned())], DVector::zeros(m0 + 4));
    let after = sub(&aug.covariance());
    let expect = 0.5 * (before.determinant().ln() - after.determinant().ln());

    let score = mutual_information(&p, &theta, 0, |q| {
        let n = q.add_block(BlockKind::Euclidean(2), vec![0.0; 2], -1);
        q.add_factor(Arc::new(LinearFactor::new(
            vec![(n, a_new.clone()), (ids[19], a_th.clone()), (ids[0], a_old.clone())],
            DVector::zeros(4),
        )))?;
        Ok(())
    })
    .unwrap();
    (score, expect)
}


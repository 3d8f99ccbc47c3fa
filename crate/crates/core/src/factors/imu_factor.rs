//! Preintegrated IMU residual between two sensor states.

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};

use crate::geometry::{skew, so3_right_jacobian};
use crate::imu::{preintegrate, ImuBias, Matrix15, Preintegrated, SensorState};
use crate::solver::{BlockId, Evaluation, Factor, FactorError};

type Vector15 = SVector<f64, 15>;
type Matrix15x15 = SMatrix<f64, 15, 15>;

/// Bias change that triggers re-integration at a new linearization point.
pub const RELINEARIZE_BIAS: f64 = 1e-3;

/// Residual `[Δp, δθ, Δv, δb_g, δb_a]` (predicted minus measured), whitened
/// by the preintegration covariance fixed at construction.
///
/// Blocks: `x_WS(k)`, `x_WS(k+1)`, `t_d` (1 parameter). The `t_d` column is
/// a central finite difference of re-integrated deltas with step `fd_step`.
#[derive(Debug)]
pub struct ImuFactor {
    blocks: [BlockId; 3],
    sqrt_info: Matrix15x15,
    fd_step: f64,
    cache: Mutex<Arc<Preintegrated>>,
}

impl ImuFactor {
    pub fn new(state_k: BlockId, state_k1: BlockId, time_delay: BlockId, pre: Preintegrated) -> Self {
        let sqrt_info = sqrt_information(&pre.covariance);
        let fd_step = 0.5 * pre.noise.period();
        Self {
            blocks: [state_k, state_k1, time_delay],
            sqrt_info,
            fd_step,
            cache: Mutex::new(Arc::new(pre)),
        }
    }

    pub fn sqrt_information(&self) -> &Matrix15x15 {
        &self.sqrt_info
    }

    /// Preintegration valid for `t_d` near the bias `b`.
    fn preintegration(&self, t_d: f64, b: &ImuBias) -> Result<Arc<Preintegrated>, FactorError> {
        let mut cache = self.cache.lock().expect("cache lock");
        let stale = cache.t_d != t_d
            || (cache.bias.gyro - b.gyro).amax() > RELINEARIZE_BIAS
            || (cache.bias.accel - b.accel).amax() > RELINEARIZE_BIAS;
        if stale {
            *cache = Arc::new(cache.reintegrate(t_d, b)?);
        }
        Ok(cache.clone())
    }

    /// Unwhitened residual of the two states given preintegrated deltas.
    pub fn raw_residual(pre: &Preintegrated, s0: &SensorState, s1: &SensorState) -> Vector15 {
        residual_and_jacobians(pre, s0, s1, false).0
    }
}

/// Upper-triangular `L` with `LᵀL = Σ⁻¹`.
pub fn sqrt_information(cov: &Matrix15) -> Matrix15x15 {
    let sym = (cov + cov.transpose()) * 0.5;
    let info = sym
        .cholesky()
        .expect("preintegration covariance is positive definite")
        .inverse();
    let info = (info + info.transpose()) * 0.5;
    info.cholesky().expect("information is positive definite").l().transpose()
}

fn residual_and_jacobians(
    pre: &Preintegrated,
    s0: &SensorState,
    s1: &SensorState,
    with_jac: bool,
) -> (Vector15, Option<(Matrix15x15, Matrix15x15)>) {
    let dt = pre.duration;
    let g = pre.noise.gravity;
    let (dp, dq, dv) = pre.corrected(&s0.bias());
    let r0t = s0.q_ws.to_matrix().transpose();
    let xp = s1.p_ws - s0.p_ws - s0.v_ws * dt - 0.5 * g * dt * dt;
    let xv = s1.v_ws - s0.v_ws - g * dt;
    let q1inv = s1.q_ws.inverse();
    let e = q1inv.mul(&s0.q_ws).mul(&dq);
    let (ev, ew) = (*e.eta(), e.eps());

    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(dp - r0t * xp));
    r.fixed_rows_mut::<3>(3).copy_from(&(2.0 * ev));
    r.fixed_rows_mut::<3>(6).copy_from(&(dv - r0t * xv));
    r.fixed_rows_mut::<3>(9).copy_from(&(s0.b_g - s1.b_g));
    r.fixed_rows_mut::<3>(12).copy_from(&(s0.b_a - s1.b_a));
    if !with_jac {
        return (r, None);
    }

    let r1t = s1.q_ws.to_matrix().transpose();
    let i3 = Matrix3::identity();
    let left = ew * i3 - skew(&ev);
    let dbg = s0.b_g - pre.bias.gyro;
    let right = (ew * i3 + skew(&ev)) * so3_right_jacobian(&(pre.dq_dbg * dbg)) * pre.dq_dbg;

    let mut j0 = Matrix15x15::zeros();
    let mut j1 = Matrix15x15::zeros();
    let put = |m: &mut Matrix15x15, r: usize, c: usize, v: &Matrix3<f64>| {
        m.fixed_view_mut::<3, 3>(r, c).copy_from(v);
    };
    // position rows
    put(&mut j0, 0, 0, &r0t);
    put(&mut j0, 0, 3, &(-r0t * skew(&xp)));
    put(&mut j0, 0, 6, &(r0t * dt));
    put(&mut j0, 0, 9, &pre.dp_dbg);
    put(&mut j0, 0, 12, &pre.dp_dba);
    put(&mut j1, 0, 0, &(-r0t));
    // rotation rows
    put(&mut j0, 3, 3, &(left * r1t));
    put(&mut j0, 3, 9, &right);
    put(&mut j1, 3, 3, &(-left * r1t));
    // velocity rows
    put(&mut j0, 6, 3, &(-r0t * skew(&xv)));
    put(&mut j0, 6, 6, &r0t);
    put(&mut j0, 6, 9, &pre.dv_dbg);
    put(&mut j0, 6, 12, &pre.dv_dba);
    put(&mut j1, 6, 6, &(-r0t));
    // bias rows
    put(&mut j0, 9, 9, &i3);
    put(&mut j1, 9, 9, &(-i3));
    put(&mut j0, 12, 12, &i3);
    put(&mut j1, 12, 12, &(-i3));
    (r, Some((j0, j1)))
}

impl Factor for ImuFactor {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        15
    }

    fn detached(&self) -> Option<Arc<dyn Factor>> {
        let pre = self.cache.lock().expect("cache lock").clone();
        Some(Arc::new(Self {
            blocks: self.blocks,
            sqrt_info: self.sqrt_info,
            fd_step: self.fd_step,
            cache: Mutex::new(pre),
        }))
    }

    fn evaluate(&self, params: &[&[f64]], want: &[bool]) -> Result<Evaluation, FactorError> {
        let s0 = SensorState::from_params(params[0]);
        let s1 = SensorState::from_params(params[1]);
        let t_d = params[2][0];
        let pre = self.preintegration(t_d, &s0.bias())?;
        let (r, jac) = residual_and_jacobians(&pre, &s0, &s1, want[0] || want[1]);
        let residual = self.sqrt_info * r;
        let mut jacobians = vec![None, None, None];
        if let Some((j0, j1)) = jac {
            if want[0] {
                jacobians[0] = Some(DMatrix::from_column_slice(15, 15, (self.sqrt_info * j0).as_slice()));
            }
            if want[1] {
                jacobians[1] = Some(DMatrix::from_column_slice(15, 15, (self.sqrt_info * j1).as_slice()));
            }
        }
        if want[2] {
            let h = self.fd_step;
            let eval = |td: f64| -> Result<Vector15, FactorError> {
                let p = preintegrate(pre.buffer(), &pre.bias, &pre.noise, pre.t_start_ns, pre.t_end_ns, td)?;
                Ok(residual_and_jacobians(&p, &s0, &s1, false).0)
            };
            let d = (eval(t_d + h)? - eval(t_d - h)?) / (2.0 * h);
            jacobians[2] = Some(DMatrix::from_column_slice(15, 1, (self.sqrt_info * d).as_slice()));
        }
        Ok(Evaluation {
            residual: DVector::from_column_slice(residual.as_slice()),
            jacobians,
        })
    }
}

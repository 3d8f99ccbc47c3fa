//! IMU measurements, sensor states and preintegration.
//!
//! Raw IMU stamps run ahead of the camera clock by the time delay `t_d`: a
//! sample stamped `s` was taken at camera time `s - t_d`. Preintegration over
//! the camera interval `[t_start, t_end]` therefore reads samples stamped in
//! `[t_start + t_d, t_end + t_d]`.
//!
//! The relative motion is integrated with classical RK4 on `(Δq, Δv, Δp)`,
//! with the angular rate and specific force between samples given by 4-point
//! Lagrange interpolation. Both are fourth order, so a 400 Hz stream of a
//! smooth trajectory integrates to ~1e-10 relative accuracy. Covariance and
//! bias Jacobians are propagated to first order in the error state
//! `[δφ, δv, δp]` (right perturbation of `ΔR`) plus the two bias blocks.

use std::sync::Arc;

use nalgebra::{Matrix3, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, so3_right_jacobian, Quat};

pub type Matrix15 = SMatrix<f64, 15, 15>;
type Matrix9 = SMatrix<f64, 9, 9>;
type Matrix9x6 = SMatrix<f64, 9, 6>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImuError {
    #[error("IMU buffer does not cover [{start:.6}, {end:.6}] s (shifted by t_d)")]
    InsufficientCoverage { start: f64, end: f64 },
    #[error("IMU stamps must be strictly increasing (index {0})")]
    NonMonotonic(usize),
    #[error("interval must have positive duration")]
    EmptyInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuMeasurement {
    /// Raw IMU clock stamp [ns].
    pub stamp_ns: i64,
    /// Angular rate [rad/s].
    pub gyro: Vector3<f64>,
    /// Specific force [m/s²].
    pub accel: Vector3<f64>,
}

/// Noise densities in continuous time (per √Hz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoiseParams {
    pub sigma_g: f64,
    pub sigma_a: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
    /// Sample rate [Hz].
    pub rate: f64,
    pub gravity: Vector3<f64>,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self {
            sigma_g: 2.78e-3,
            sigma_a: 2.52e-2,
            sigma_bg: 1.65e-5,
            sigma_ba: 4.41e-3,
            rate: 400.0,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }
}

impl ImuNoiseParams {
    pub fn validate(&self) -> Result<(), String> {
        let sig = [self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba];
        if sig.iter().any(|s| !(*s > 0.0)) || !(self.rate > 0.0) {
            return Err(format!("noise densities and rate must be positive: {self:?}"));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Sensor state: pose in the world, world-frame velocity and IMU biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorState {
    pub p_ws: Vector3<f64>,
    pub q_ws: Quat,
    pub v_ws: Vector3<f64>,
    pub b_g: Vector3<f64>,
    pub b_a: Vector3<f64>,
}

impl SensorState {
    pub const PARAM_DIM: usize = 16;
    pub const TANGENT_DIM: usize = 15;

    /// `[p, q(xyzw), v, b_g, b_a]`.
    pub fn to_params(&self) -> [f64; 16] {
        let q = self.q_ws.to_xyzw();
        [
            self.p_ws.x, self.p_ws.y, self.p_ws.z, q[0], q[1], q[2], q[3], self.v_ws.x, self.v_ws.y,
            self.v_ws.z, self.b_g.x, self.b_g.y, self.b_g.z, self.b_a.x, self.b_a.y, self.b_a.z,
        ]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            p_ws: Vector3::new(p[0], p[1], p[2]),
            q_ws: Quat::from_xyzw([p[3], p[4], p[5], p[6]]),
            v_ws: Vector3::new(p[7], p[8], p[9]),
            b_g: Vector3::new(p[10], p[11], p[12]),
            b_a: Vector3::new(p[13], p[14], p[15]),
        }
    }

    pub fn bias(&self) -> ImuBias {
        ImuBias {
            gyro: self.b_g,
            accel: self.b_a,
        }
    }
}

/// Shared, immutable, time-ordered IMU stream.
#[derive(Debug, Clone)]
pub struct ImuBuffer {
    meas: Arc<Vec<ImuMeasurement>>,
}

impl ImuBuffer {
    pub fn new(meas: Vec<ImuMeasurement>) -> Result<Self, ImuError> {
        if let Some(i) = meas.windows(2).position(|w| w[1].stamp_ns <= w[0].stamp_ns) {
            return Err(ImuError::NonMonotonic(i + 1));
        }
        Ok(Self { meas: Arc::new(meas) })
    }

    pub fn measurements(&self) -> &[ImuMeasurement] {
        &self.meas
    }

    pub fn len(&self) -> usize {
        self.meas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meas.is_empty()
    }

    /// Samples whose raw stamps fall in `[from_ns, to_ns]`.
    pub fn window(&self, from_ns: i64, to_ns: i64) -> &[ImuMeasurement] {
        let a = self.meas.partition_point(|m| m.stamp_ns < from_ns);
        let b = self.meas.partition_point(|m| m.stamp_ns <= to_ns);
        &self.meas[a..b.max(a)]
    }
}

/// Preintegrated relative motion between two camera stamps.
#[derive(Debug, Clone)]
pub struct Preintegrated {
    pub delta_p: Vector3<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_q: Quat,
    /// Bias linearization point.
    pub bias: ImuBias,
    /// Covariance in residual order `[p, φ, v, b_g, b_a]`.
    pub covariance: Matrix15,
    /// Camera-clock interval length [s].
    pub duration: f64,
    pub t_start_ns: i64,
    pub t_end_ns: i64,
    pub t_d: f64,
    pub dq_dbg: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub noise: ImuNoiseParams,
    buffer: ImuBuffer,
}

impl Preintegrated {
    pub fn buffer(&self) -> &ImuBuffer {
        &self.buffer
    }

    /// Integrates the retained buffer again with a new delay and/or bias.
    pub fn reintegrate(&self, t_d: f64, bias: &ImuBias) -> Result<Preintegrated, ImuError> {
        preintegrate(&self.buffer, bias, &self.noise, self.t_start_ns, self.t_end_ns, t_d)
    }

    /// First-order bias correction of the deltas around the linearization point.
    pub fn corrected(&self, bias: &ImuBias) -> (Vector3<f64>, Quat, Vector3<f64>) {
        let dbg = bias.gyro - self.bias.gyro;
        let dba = bias.accel - self.bias.accel;
        let dp = self.delta_p + self.dp_dbg * dbg + self.dp_dba * dba;
        let dv = self.delta_v + self.dv_dbg * dbg + self.dv_dba * dba;
        let dq = self.delta_q.mul(&Quat::exp(&(self.dq_dbg * dbg)));
        (dp, dq, dv)
    }

    /// State at the interval end that zeroes the residual against `s0`.
    pub fn predict(&self, s0: &SensorState) -> SensorState {
        let dt = self.duration;
        let g = self.noise.gravity;
        let (dp, dq, dv) = self.corrected(&s0.bias());
        let r0 = s0.q_ws.to_matrix();
        SensorState {
            p_ws: s0.p_ws + s0.v_ws * dt + 0.5 * g * dt * dt + r0 * dp,
            q_ws: s0.q_ws.mul(&dq),
            v_ws: s0.v_ws + g * dt + r0 * dv,
            b_g: s0.b_g,
            b_a: s0.b_a,
        }
    }
}

fn quat_derivative(q: &Vector4<f64>, w: &Vector3<f64>) -> Vector4<f64> {
    // ½ q ⊗ [w, 0], q stored as [x, y, z, w]
    let qv = Vector3::new(q.x, q.y, q.z);
    let v = q.w * w + qv.cross(w);
    0.5 * Vector4::new(v.x, v.y, v.z, -qv.dot(w))
}

fn quat_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    Quat::new(Vector3::new(q.x / n, q.y / n, q.z / n), q.w / n).to_matrix()
}

/// 4-point Lagrange interpolation of gyro and accel at time `t`.
fn interpolate(times: &[f64; 4], samples: &[&ImuMeasurement; 4], t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let mut w = Vector3::zeros();
    let mut a = Vector3::zeros();
    for i in 0..4 {
        let mut l = 1.0;
        for j in 0..4 {
            if i != j {
                l *= (t - times[j]) / (times[i] - times[j]);
            }
        }
        w += samples[i].gyro * l;
        a += samples[i].accel * l;
    }
    (w, a)
}

/// Preintegrates IMU samples over the camera interval `[t_start, t_end]`.
pub fn preintegrate(
    buffer: &ImuBuffer,
    bias: &ImuBias,
    noise: &ImuNoiseParams,
    t_start_ns: i64,
    t_end_ns: i64,
    t_d: f64,
) -> Result<Preintegrated, ImuError> {
    if t_end_ns <= t_start_ns {
        return Err(ImuError::EmptyInterval);
    }
    let meas = buffer.measurements();
    let duration = (t_end_ns - t_start_ns) as f64 * 1e-9;
    let coverage_err = || ImuError::InsufficientCoverage {
        start: t_start_ns as f64 * 1e-9 + t_d,
        end: t_end_ns as f64 * 1e-9 + t_d,
    };
    // sample times on the camera clock, relative to t_start
    let rel = |m: &ImuMeasurement| (m.stamp_ns - t_start_ns) as f64 * 1e-9 - t_d;

    // last sample at or before 0 and first at or after the end
    let first_after = meas.partition_point(|m| rel(m) <= 0.0);
    if first_after == 0 {
        return Err(coverage_err());
    }
    let i0 = first_after - 1;
    let i1 = meas.partition_point(|m| rel(m) < duration);
    if i0 < 1 || i1 + 1 >= meas.len() {
        return Err(coverage_err());
    }

    let mut q = Vector4::new(0.0, 0.0, 0.0, 1.0);
    let mut v = Vector3::zeros();
    let mut p = Vector3::zeros();

    let mut cov = Matrix9::zeros();
    let mut cov_bg = 0.0;
    let mut cov_ba = 0.0;
    let mut dq_dbg = Matrix3::zeros();
    let mut dv_dbg = Matrix3::zeros();
    let mut dv_dba = Matrix3::zeros();
    let mut dp_dbg = Matrix3::zeros();
    let mut dp_dba = Matrix3::zeros();

    let var_g = noise.sigma_g * noise.sigma_g;
    let var_a = noise.sigma_a * noise.sigma_a;

    for i in i0..i1 {
        let times = [rel(&meas[i - 1]), rel(&meas[i]), rel(&meas[i + 1]), rel(&meas[i + 2])];
        let samples = [&meas[i - 1], &meas[i], &meas[i + 1], &meas[i + 2]];
        let s0 = times[1].max(0.0);
        let s1 = times[2].min(duration);
        let h = s1 - s0;
        if h <= 0.0 {
            continue;
        }
        let signal = |t: f64| {
            let (w, a) = interpolate(&times, &samples, t);
            (w - bias.gyro, a - bias.accel)
        };
        let f = |q: &Vector4<f64>, v: &Vector3<f64>, w: &Vector3<f64>, a: &Vector3<f64>| {
            (quat_derivative(q, w), quat_matrix(q) * a, *v)
        };

        // error-state propagation at the step midpoint
        let r_start = quat_matrix(&q);
        let (w_mid, a_mid) = signal(s0 + 0.5 * h);

        let (w0, a0) = signal(s0);
        let (wm, am) = (w_mid, a_mid);
        let (w1, a1) = signal(s1);
        let (k1q, k1v, k1p) = f(&q, &v, &w0, &a0);
        let (k2q, k2v, k2p) = f(&(q + 0.5 * h * k1q), &(v + 0.5 * h * k1v), &wm, &am);
        let (k3q, k3v, k3p) = f(&(q + 0.5 * h * k2q), &(v + 0.5 * h * k2v), &wm, &am);
        let (k4q, k4v, k4p) = f(&(q + h * k3q), &(v + h * k3v), &w1, &a1);
        let _ = k1p;
        q += h / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
        q /= q.norm();
        p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);

        let phi = w_mid * h;
        let exp_t = Quat::exp(&phi).to_matrix().transpose();
        let jr = so3_right_jacobian(&phi);
        let ra = r_start * skew(&a_mid);

        let mut a_mat = Matrix9::identity();
        a_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&exp_t);
        a_mat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra * h));
        a_mat.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-0.5 * ra * h * h));
        a_mat.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * h));

        let mut b_mat = Matrix9x6::zeros();
        b_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * h));
        b_mat.fixed_view_mut::<3, 3>(3, 3).copy_from(&(r_start * h));
        b_mat.fixed_view_mut::<3, 3>(6, 3).copy_from(&(0.5 * r_start * h * h));
        let mut qn = SMatrix::<f64, 6, 6>::zeros();
        for k in 0..3 {
            qn[(k, k)] = var_g / h;
            qn[(k + 3, k + 3)] = var_a / h;
        }
        cov = a_mat * cov * a_mat.transpose() + b_mat * qn * b_mat.transpose();
        cov_bg += noise.sigma_bg * noise.sigma_bg * h;
        cov_ba += noise.sigma_ba * noise.sigma_ba * h;

        // bias Jacobians (positions first, they use the old velocity terms)
        dp_dba += dv_dba * h - 0.5 * r_start * h * h;
        dp_dbg += dv_dbg * h - 0.5 * ra * dq_dbg * h * h;
        dv_dba -= r_start * h;
        dv_dbg -= ra * dq_dbg * h;
        dq_dbg = exp_t * dq_dbg - jr * h;
    }

    let mut covariance = Matrix15::zeros();
    // reorder [φ, v, p] → [p, φ, v]
    let map = [3usize, 6, 0]; // internal block → residual block offset
    for (bi, &ri) in map.iter().enumerate() {
        for (bj, &rj) in map.iter().enumerate() {
            covariance
                .fixed_view_mut::<3, 3>(ri, rj)
                .copy_from(&cov.fixed_view::<3, 3>(3 * bi, 3 * bj));
        }
    }
    for k in 0..3 {
        covariance[(9 + k, 9 + k)] = cov_bg;
        covariance[(12 + k, 12 + k)] = cov_ba;
    }

    Ok(Preintegrated {
        delta_p: p,
        delta_v: v,
        delta_q: Quat::new(Vector3::new(q.x, q.y, q.z), q.w),
        bias: *bias,
        covariance,
        duration,
        t_start_ns,
        t_end_ns,
        t_d,
        dq_dbg,
        dv_dbg,
        dv_dba,
        dp_dbg,
        dp_dba,
        noise: *noise,
        buffer: buffer.clone(),
    })
}

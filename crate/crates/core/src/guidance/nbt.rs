//! Lissajous next-best trajectories in front of the target.
//!
//! A trajectory is parameterized by a warped time `t(k) = sin²(πk / 2T)` on
//! `k ∈ [0, T]`, so velocity and angular velocity vanish at both ends.
//! Positions follow
//! `x = w sin(a t + δ) + W/2`, `y = h cos(b t) + H/2`, `z = √(d − x² − y²)`
//! in the target frame, and the sensor orientation is `R_FS = Rx(φ) Ry(θ)`
//! with `φ = φ_b sin(2πt) + π`, `θ = θ_b sin(2πt)`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::NbtConfig;
use crate::geometry::{euler_xyz, rot_y, Frame, Pose, Quat};
use crate::target::TargetSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NbtError {
    #[error("trajectory leaves the sphere at k = {k}: d_nbt − x² − y² = {slack}")]
    Domain { k: f64, slack: f64 },
    #[error("time {k} outside [0, {t_nbt}]")]
    OutOfRange { k: f64, t_nbt: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NbtName {
    VertFig8,
    HorizFig8,
    HorizPan,
    VertPan,
    #[serde(rename = "diag-0")]
    Diag0,
    #[serde(rename = "diag-1")]
    Diag1,
}

impl NbtName {
    pub const ALL: [NbtName; 6] = [
        NbtName::VertFig8,
        NbtName::HorizFig8,
        NbtName::HorizPan,
        NbtName::VertPan,
        NbtName::Diag0,
        NbtName::Diag1,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NbtName::VertFig8 => "vert-fig8",
            NbtName::HorizFig8 => "horiz-fig8",
            NbtName::HorizPan => "horiz-pan",
            NbtName::VertPan => "vert-pan",
            NbtName::Diag0 => "diag-0",
            NbtName::Diag1 => "diag-1",
        }
    }
}

impl fmt::Display for NbtName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NbtSpec {
    pub name: NbtName,
    /// Angular frequency of `x` per unit warped time [rad].
    pub a: f64,
    /// Angular frequency of `y` per unit warped time [rad].
    pub b: f64,
    /// Phase of `x` [rad].
    pub delta: f64,
    pub w_traj: f64,
    pub h_traj: f64,
    /// Squared sphere radius [m²].
    pub d_nbt: f64,
    pub phi_bound: f64,
    pub theta_bound: f64,
    pub t_nbt: f64,
    /// Target width and height [m].
    pub w_calib: f64,
    pub h_calib: f64,
}

/// First-order motion of a trajectory at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NbtMotion {
    /// Velocity in the target frame [m/s].
    pub velocity: Vector3<f64>,
    /// Angular velocity in the sensor frame [rad/s].
    pub angular_velocity: Vector3<f64>,
    /// Acceleration in the target frame, without gravity [m/s²].
    pub acceleration: Vector3<f64>,
}

/// Warped time and its first two derivatives w.r.t. `k`.
fn warp(k: f64, t_nbt: f64) -> (f64, f64, f64) {
    let w = PI / t_nbt;
    let s = (0.5 * w * k).sin();
    (s * s, 0.5 * w * (w * k).sin(), 0.5 * w * w * (w * k).cos())
}

/// The six trajectory primitives for `target`.
///
/// Figure-8s use a 2:1 frequency ratio with the faster axis across the long
/// direction of the figure; pans have zero height or width; diagonals are
/// 1:1 ellipses with phase ±π/4.
pub fn build_nbt_set(target: &TargetSpec, cfg: &NbtConfig) -> Vec<NbtSpec> {
    let base = |name, a, b, delta, w_traj, h_traj| NbtSpec {
        name,
        a,
        b,
        delta,
        w_traj,
        h_traj,
        d_nbt: cfg.d_nbt,
        phi_bound: cfg.phi_bound,
        theta_bound: cfg.theta_bound,
        t_nbt: cfg.t_nbt,
        w_calib: target.width(),
        h_calib: target.height(),
    };
    let (w, h, tau) = (cfg.w_traj, cfg.h_traj, 2.0 * PI);
    vec![
        base(NbtName::VertFig8, 2.0 * tau, tau, 0.0, w, h),
        base(NbtName::HorizFig8, tau, 2.0 * tau, 0.0, w, h),
        base(NbtName::HorizPan, tau, tau, 0.0, w, 0.0),
        base(NbtName::VertPan, tau, tau, 0.0, 0.0, h),
        base(NbtName::Diag0, tau, tau, PI / 4.0, w, h),
        base(NbtName::Diag1, tau, tau, -PI / 4.0, w, h),
    ]
}

impl NbtSpec {
    fn check_range(&self, k: f64) -> Result<(), NbtError> {
        if !(0.0..=self.t_nbt).contains(&k) {
            return Err(NbtError::OutOfRange { k, t_nbt: self.t_nbt });
        }
        Ok(())
    }

    /// `(x, y)` and their first two derivatives w.r.t. warped time.
    fn planar(&self, t: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let ax = self.a * t + self.delta;
        let by = self.b * t;
        (
            [
                self.w_traj * ax.sin() + 0.5 * self.w_calib,
                self.h_traj * by.cos() + 0.5 * self.h_calib,
            ],
            [self.w_traj * self.a * ax.cos(), -self.h_traj * self.b * by.sin()],
            [
                -self.w_traj * self.a * self.a * ax.sin(),
                -self.h_traj * self.b * self.b * by.cos(),
            ],
        )
    }

    /// Euler angles `(φ, θ)` and their derivatives w.r.t. warped time.
    fn angles(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let (s, c) = (2.0 * PI * t).sin_cos();
        (
            [self.phi_bound * s + PI, self.theta_bound * s],
            [2.0 * PI * self.phi_bound * c, 2.0 * PI * self.theta_bound * c],
        )
    }

    /// Sensor pose `T_FS` at time `k`.
    pub fn pose(&self, k: f64) -> Result<Pose, NbtError> {
        self.check_range(k)?;
        let (t, _, _) = warp(k, self.t_nbt);
        let ([x, y], _, _) = self.planar(t);
        let slack = self.d_nbt - x * x - y * y;
        if slack < 0.0 {
            return Err(NbtError::Domain { k, slack });
        }
        let ([phi, theta], _) = self.angles(t);
        Ok(Pose::new(
            Frame::Fiducial,
            Frame::Sensor,
            Quat::from_matrix(&euler_xyz(phi, theta, 0.0)),
            Vector3::new(x, y, slack.sqrt()),
        ))
    }

    /// Rotation `R_FS` at time `k`.
    pub fn rotation(&self, k: f64) -> Result<Matrix3<f64>, NbtError> {
        self.check_range(k)?;
        let ([phi, theta], _) = self.angles(warp(k, self.t_nbt).0);
        Ok(euler_xyz(phi, theta, 0.0))
    }

    /// Closed-form velocity, angular velocity and acceleration at time `k`.
    pub fn derivatives(&self, k: f64) -> Result<NbtMotion, NbtError> {
        self.check_range(k)?;
        let (t, dt, ddt) = warp(k, self.t_nbt);
        let ([x, y], [x1, y1], [x2, y2]) = self.planar(t);
        let slack = self.d_nbt - x * x - y * y;
        if slack <= 0.0 {
            return Err(NbtError::Domain { k, slack });
        }
        let z = slack.sqrt();
        // derivatives of z w.r.t. warped time
        let z1 = -(x * x1 + y * y1) / z;
        let z2 = -(x1 * x1 + x * x2 + y1 * y1 + y * y2 + z1 * z1) / z;
        let d1 = Vector3::new(x1, y1, z1);
        let d2 = Vector3::new(x2, y2, z2);

        let ([_, theta], [phi1, theta1]) = self.angles(t);
        // body rate of Rx(φ) Ry(θ): Ry(θ)ᵀ e_x φ̇ + e_y θ̇
        let omega_t = rot_y(theta).transpose() * Vector3::x() * phi1 + Vector3::y() * theta1;
        Ok(NbtMotion {
            velocity: d1 * dt,
            angular_velocity: omega_t * dt,
            acceleration: d2 * dt * dt + d1 * ddt,
        })
    }

    /// Positions sampled uniformly in `k`, for display.
    pub fn polyline(&self, samples: usize) -> Result<Vec<Vector3<f64>>, NbtError> {
        let n = samples.max(2);
        (0..n)
            .map(|i| Ok(*self.pose(self.t_nbt * i as f64 / (n - 1) as f64)?.translation()))
            .collect()
    }

    /// Largest `x² + y²` over the curve, sampled densely.
    pub fn max_planar_radius_sq(&self) -> f64 {
        (0..=2000)
            .map(|i| {
                let ([x, y], _, _) = self.planar(i as f64 / 2000.0);
                x * x + y * y
            })
            .fold(0.0, f64::max)
    }
}
